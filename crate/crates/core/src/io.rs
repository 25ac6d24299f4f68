//! CSV readers and writers for panels, sensor tables, estimates and metrics.
//!
//! Lines starting with `#` are comments. Writers put a provenance comment
//! (`# config_hash=...,seed=...`) on the first line when given one.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::baselines::MetricReport;
use crate::error::{Result, SatcnError};
use crate::graph::{Metric, SensorSet};
use crate::sampling::TimeSeriesPanel;

/// Provenance stamped on every written artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactMeta {
    pub fn comment_line(&self) -> String {
        format!("# config_hash={},seed={}", self.config_hash, self.seed)
    }

    /// Parses the comment line written by [`ArtifactMeta::comment_line`].
    pub fn parse(line: &str) -> Option<Self> {
        let body = line.strip_prefix('#')?.trim();
        let mut hash = None;
        let mut seed = None;
        for part in body.split(',') {
            match part.trim().split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(ArtifactMeta {
            config_hash: hash?,
            seed: seed?,
        })
    }
}

fn data_err(line: u64, column: usize, message: impl Into<String>) -> SatcnError {
    SatcnError::Data {
        line,
        column,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> SatcnError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SatcnError::Io(io),
        kind => data_err(line, 0, format!("{kind:?}")),
    }
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| SatcnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn writer(path: &Path, meta: Option<&ArtifactMeta>) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(m) = meta {
        writeln!(w, "{}", m.comment_line())?;
    }
    Ok(w)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_value(field: &str, line: u64, column: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| data_err(line, column, format!("cannot parse {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(data_err(line, column, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn check_unique_ids(ids: &[String], line: u64, offset: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (c, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(data_err(line, c + 1 + offset, "empty sensor id"));
        }
        if !seen.insert(id) {
            return Err(data_err(line, c + 1 + offset, format!("duplicate sensor id {id:?}")));
        }
    }
    Ok(())
}

/// Reads a panel: first column timestamp, one column per sensor, rows in
/// time order. Empty cells are unobserved.
pub fn read_panel<R: Read>(src: R) -> Result<TimeSeriesPanel> {
    let mut rdr = reader(src);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let header_line = line_of(&header).max(1);
    if header.len() < 2 {
        return Err(data_err(header_line, 1, "panel header needs a timestamp column and at least one sensor"));
    }
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    check_unique_ids(&ids, header_line, 1)?;
    let n = ids.len();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        if rec.len() != n + 1 {
            return Err(data_err(
                line,
                rec.len().min(n + 1) + 1,
                format!("expected {} fields, found {}", n + 1, rec.len()),
            ));
        }
        timestamps.push(rec[0].to_string());
        for c in 0..n {
            let field = &rec[c + 1];
            if field.is_empty() {
                values.push(0.0);
                mask.push(false);
            } else {
                values.push(parse_value(field, line, c + 2)?);
                mask.push(true);
            }
        }
    }
    let t = timestamps.len();
    if t == 0 {
        return Err(data_err(header_line + 1, 1, "panel has no rows"));
    }
    // stored row-major as time x sensor; the panel is sensor x time
    let values = Array2::from_shape_vec((t, n), values).expect("counted").reversed_axes();
    let mask = Array2::from_shape_vec((t, n), mask).expect("counted").reversed_axes();
    TimeSeriesPanel::new(
        ids,
        timestamps,
        values.as_standard_layout().into_owned(),
        mask.as_standard_layout().into_owned(),
    )
}

pub fn read_panel_csv(path: &Path) -> Result<TimeSeriesPanel> {
    read_panel(open(path)?)
}

fn fmt_value(v: f64) -> String {
    // Display prints the shortest representation that parses back exactly
    format!("{v}")
}

/// Writes `values` (`rows x T`, one row per id) as a panel CSV; cells with a
/// `false` mask entry are left empty.
pub fn write_table<W: Write>(
    mut w: W,
    ids: &[String],
    timestamps: &[String],
    values: &Array2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(&mut w);
    let mut header = vec!["timestamp".to_string()];
    header.extend(ids.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (t, ts) in timestamps.iter().enumerate() {
        let mut row = Vec::with_capacity(ids.len() + 1);
        row.push(ts.clone());
        for i in 0..ids.len() {
            let observed = mask.map_or(true, |m| m[[i, t]]);
            row.push(if observed { fmt_value(values[[i, t]]) } else { String::new() });
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_panel_csv(path: &Path, panel: &TimeSeriesPanel, meta: Option<&ArtifactMeta>) -> Result<()> {
    let mut w = writer(path, meta)?;
    write_table(&mut w, &panel.ids, &panel.timestamps, &panel.values, Some(&panel.obs_mask))?;
    w.flush()?;
    Ok(())
}

/// Estimates for `ids` (rows of `values`) at `timestamps`.
pub fn write_estimates_csv(
    path: &Path,
    ids: &[String],
    timestamps: &[String],
    values: &Array2<f64>,
    meta: Option<&ArtifactMeta>,
) -> Result<()> {
    if values.dim() != (ids.len(), timestamps.len()) {
        return Err(SatcnError::shape("estimate table does not match its labels"));
    }
    let mut w = writer(path, meta)?;
    write_table(&mut w, ids, timestamps, values, None)?;
    w.flush()?;
    Ok(())
}

/// Reads a sensor table: `id,x,y` (Euclidean), `id,lat,lon` (haversine), or
/// an `n x n` distance matrix whose header row holds the ids (optionally
/// preceded by a label column).
pub fn read_sensors<R: Read>(src: R) -> Result<SensorSet> {
    let mut rdr = reader(src);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let header_line = line_of(&header).max(1);
    let cols: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(csv_err)?;

    let coord_metric = match cols.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["id", "x", "y"] => Some(Metric::Euclidean),
        ["id", "lat", "lon"] | ["id", "latitude", "longitude"] => Some(Metric::Haversine),
        _ => None,
    };
    if let Some(metric) = coord_metric {
        let mut ids = Vec::with_capacity(records.len());
        let mut coords = Vec::with_capacity(records.len());
        for rec in &records {
            let line = line_of(rec);
            if rec.len() != 3 {
                return Err(data_err(line, rec.len().min(3) + 1, format!("expected 3 fields, found {}", rec.len())));
            }
            ids.push(rec[0].to_string());
            let a = parse_value(&rec[1], line, 2)?;
            let b = parse_value(&rec[2], line, 3)?;
            if metric == Metric::Haversine && (a.abs() > 90.0 || b.abs() > 180.0) {
                return Err(data_err(line, 2, "latitude/longitude out of range"));
            }
            coords.push([a, b]);
        }
        check_unique_ids(&ids, header_line + 1, 0)?;
        return SensorSet::from_coords(ids, coords, metric);
    }

    // distance matrix, with or without a leading label column
    let n_rows = records.len();
    let labelled = header.len() == n_rows + 1;
    if !labelled && header.len() != n_rows {
        return Err(data_err(
            header_line,
            1,
            format!(
                "unrecognized sensor header: expected id,x,y / id,lat,lon or an {n_rows}x{n_rows} distance matrix"
            ),
        ));
    }
    let skip = usize::from(labelled);
    let ids: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    check_unique_ids(&ids, header_line, skip)?;
    let mut dist = Array2::zeros((n_rows, n_rows));
    for (r, rec) in records.iter().enumerate() {
        let line = line_of(rec);
        if rec.len() != header.len() {
            return Err(data_err(line, rec.len().min(header.len()) + 1, format!(
                "expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        if labelled && rec[0] != ids[r] {
            return Err(data_err(line, 1, format!("row label {:?} does not match column id {:?}", &rec[0], ids[r])));
        }
        for c in 0..n_rows {
            let v = parse_value(&rec[c + skip], line, c + skip + 1)?;
            if v < 0.0 {
                return Err(data_err(line, c + skip + 1, "negative distance"));
            }
            dist[[r, c]] = v;
        }
    }
    SensorSet::from_distance_matrix(ids, dist)
}

pub fn read_sensors_csv(path: &Path) -> Result<SensorSet> {
    read_sensors(open(path)?)
}

/// Writes coordinates when the set has them, otherwise the distance matrix.
pub fn write_sensors_csv(path: &Path, s: &SensorSet, meta: Option<&ArtifactMeta>) -> Result<()> {
    let mut w = writer(path, meta)?;
    {
        let mut out = csv::Writer::from_writer(&mut w);
        match (s.coords(), s.metric()) {
            (Some(coords), Some(metric)) => {
                let names = match metric {
                    Metric::Euclidean => ["id", "x", "y"],
                    Metric::Haversine => ["id", "lat", "lon"],
                };
                out.write_record(names).map_err(csv_err)?;
                for (id, c) in s.ids().iter().zip(coords) {
                    out.write_record([id.clone(), fmt_value(c[0]), fmt_value(c[1])]).map_err(csv_err)?;
                }
            }
            _ => {
                let mut header = vec!["id".to_string()];
                header.extend(s.ids().iter().cloned());
                out.write_record(&header).map_err(csv_err)?;
                for (r, id) in s.ids().iter().enumerate() {
                    let mut row = vec![id.clone()];
                    row.extend(s.dist().row(r).iter().map(|&v| fmt_value(v)));
                    out.write_record(&row).map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// One sensor id per line (an optional `id` header is skipped).
pub fn read_id_list<R: Read>(src: R) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src);
    let mut ids = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        if rec.len() > 1 {
            return Err(data_err(line, 2, "expected one sensor id per line"));
        }
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() || (ids.is_empty() && line == 1 && id.eq_ignore_ascii_case("id")) {
            continue;
        }
        ids.push(id);
    }
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(data_err(0, 1, format!("duplicate target id {id:?}")));
        }
    }
    Ok(ids)
}

pub fn read_id_list_file(path: &Path) -> Result<Vec<String>> {
    read_id_list(open(path)?)
}

/// A labelled metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub report: MetricReport,
}

pub fn write_metrics<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "seed", "rmse", "mae", "count"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.seed.to_string(),
            fmt_value(r.report.rmse),
            fmt_value(r.report.mae),
            r.report.count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow], meta: Option<&ArtifactMeta>) -> Result<()> {
    let mut w = writer(path, meta)?;
    write_metrics(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

/// Plain-text table of metric rows.
pub fn format_metric_table(rows: &[MetricRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>6}  {:>12}  {:>12}  {:>8}\n", "method", "seed", "rmse", "mae", "count");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>6}  {:>12.6}  {:>12.6}  {:>8}\n",
            r.method, r.seed, r.report.rmse, r.report.mae, r.report.count
        ));
    }
    s
}

/// `iteration,train_loss,val_mae` history.
pub fn write_history_csv(path: &Path, rows: &[[String; 3]], meta: Option<&ArtifactMeta>) -> Result<()> {
    let mut w = writer(path, meta)?;
    {
        let mut out = csv::Writer::from_writer(&mut w);
        out.write_record(["iteration", "train_loss", "val_mae"]).map_err(csv_err)?;
        for r in rows {
            out.write_record(r).map_err(csv_err)?;
        }
        out.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the provenance comment from the first line of an artifact.
pub fn read_meta(path: &Path) -> Result<Option<ArtifactMeta>> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s)?;
    Ok(s.lines().next().and_then(ArtifactMeta::parse))
}
