//! Observation panels and random training-sample generation.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatcnError};
use crate::graph::{build_full_adjacency, GraphSchedule, NeighborGraph, SensorSet};

/// An `n x T` signal matrix with an explicit observation mask.
///
/// Values at unobserved cells carry no meaning; every consumer reads them
/// through the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    pub ids: Vec<String>,
    pub timestamps: Vec<String>,
    pub values: Array2<f64>,
    pub obs_mask: Array2<bool>,
    pub frequency: Option<String>,
}

impl TimeSeriesPanel {
    pub fn new(
        ids: Vec<String>,
        timestamps: Vec<String>,
        values: Array2<f64>,
        obs_mask: Array2<bool>,
    ) -> Result<Self> {
        let (n, t) = values.dim();
        if obs_mask.dim() != (n, t) {
            return Err(SatcnError::shape(format!(
                "mask {:?} does not match values {:?}",
                obs_mask.dim(),
                values.dim()
            )));
        }
        if ids.len() != n || timestamps.len() != t {
            return Err(SatcnError::shape(format!(
                "{} ids and {} timestamps for a {n}x{t} panel",
                ids.len(),
                timestamps.len()
            )));
        }
        if t == 0 {
            return Err(SatcnError::invalid("panel has no time steps"));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if obs_mask[[i, j]] && !v.is_finite() {
                return Err(SatcnError::invalid(format!("non-finite observation at ({i}, {j})")));
            }
        }
        Ok(TimeSeriesPanel {
            ids,
            timestamps,
            values,
            obs_mask,
            frequency: None,
        })
    }

    /// A fully observed panel with generated ids and timestamps.
    pub fn fully_observed(values: Array2<f64>) -> Result<Self> {
        let (n, t) = values.dim();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let timestamps = (0..t).map(|j| j.to_string()).collect();
        let mask = Array2::from_elem((n, t), true);
        Self::new(ids, timestamps, values, mask)
    }

    pub fn n_sensors(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.obs_mask.iter().filter(|&&o| o).count()
    }

    /// Keeps the given sensor rows, in order.
    pub fn select_sensors(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_sensors()) {
            return Err(SatcnError::invalid(format!("sensor row {bad} out of range")));
        }
        let t = self.n_steps();
        let values = Array2::from_shape_fn((rows.len(), t), |(a, j)| self.values[[rows[a], j]]);
        let obs_mask = Array2::from_shape_fn((rows.len(), t), |(a, j)| self.obs_mask[[rows[a], j]]);
        Ok(TimeSeriesPanel {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            timestamps: self.timestamps.clone(),
            values,
            obs_mask,
            frequency: self.frequency.clone(),
        })
    }

    /// Keeps time steps `range.start..range.end`.
    pub fn select_steps(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_steps() {
            return Err(SatcnError::invalid(format!(
                "step range {range:?} invalid for {} steps",
                self.n_steps()
            )));
        }
        Ok(TimeSeriesPanel {
            ids: self.ids.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.slice(s![.., range.clone()]).to_owned(),
            obs_mask: self.obs_mask.slice(s![.., range]).to_owned(),
            frequency: self.frequency.clone(),
        })
    }

    /// Reorders / extends rows to follow `sensors`: sensors absent from the
    /// panel become fully unobserved rows.
    pub fn align_to(&self, sensors: &SensorSet) -> Self {
        let t = self.n_steps();
        let n = sensors.len();
        let mut values = Array2::zeros((n, t));
        let mut obs_mask = Array2::from_elem((n, t), false);
        for (row, id) in sensors.ids().iter().enumerate() {
            if let Some(src) = self.ids.iter().position(|p| p == id) {
                values.row_mut(row).assign(&self.values.row(src));
                obs_mask.row_mut(row).assign(&self.obs_mask.row(src));
            }
        }
        TimeSeriesPanel {
            ids: sensors.ids().to_vec(),
            timestamps: self.timestamps.clone(),
            values,
            obs_mask,
            frequency: self.frequency.clone(),
        }
    }
}

/// Z-score statistics of the observed training entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };

    /// Mean and population standard deviation over observed cells. A zero
    /// spread falls back to a unit scale.
    pub fn fit(panel: &TimeSeriesPanel) -> Result<Self> {
        let observed: Vec<f64> = panel
            .values
            .iter()
            .zip(panel.obs_mask.iter())
            .filter_map(|(&v, &o)| o.then_some(v))
            .collect();
        if observed.is_empty() {
            return Err(SatcnError::invalid("panel has no observed entries"));
        }
        let count = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / count;
        let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let std = var.sqrt();
        let std = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Normalized values with unobserved cells set to zero.
    pub fn normalize_panel(&self, panel: &TimeSeriesPanel) -> Array2<f64> {
        let mut out = panel.values.mapv(|v| self.apply(v));
        out.zip_mut_with(&panel.obs_mask, |v, &o| {
            if !o {
                *v = 0.0;
            }
        });
        out
    }
}

/// Shape parameters of a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    /// Output window length.
    pub h: usize,
    /// Temporal reduction of the network.
    pub u: usize,
    /// Neighbour count.
    pub k: usize,
    /// Nodes simulated as unknown per sample.
    pub n_masked: usize,
    /// Samples per batch.
    pub batch_size: usize,
}

/// One simulated kriging problem.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// First panel column of the input window.
    pub start: usize,
    /// Normalized input, `n x (h + u)`, masked rows and unobserved cells zero.
    pub input: Array2<f64>,
    /// Normalized target, `n x h`, zero where unobserved.
    pub target: Array2<f64>,
    /// Graphs for the first (masked) spatial layer.
    pub masked_graphs: GraphSchedule,
    /// Graph for every later spatial layer.
    pub full_graph: GraphSchedule,
    /// Nodes simulated as unknown, ascending.
    pub omega: Vec<usize>,
    /// Target cells that carry an observation.
    pub eval_mask: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub samples: Vec<TrainingSample>,
}

/// Draws one batch of random windows with random masked node sets.
///
/// Each sample takes a window of `h + u` columns starting uniformly in
/// `[0, p - h - u]`, zeros the rows of `n_masked` randomly chosen nodes and
/// builds the masked graph with those nodes (and any node unobserved in a
/// given column) barred from sending.
pub fn generate_training_batch<R: Rng + ?Sized>(
    panel: &TimeSeriesPanel,
    sensors: &SensorSet,
    norm: &Normalization,
    spec: &BatchSpec,
    full_graph: Option<Arc<NeighborGraph>>,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let n = panel.n_sensors();
    let p = panel.n_steps();
    if sensors.len() != n {
        return Err(SatcnError::shape(format!(
            "panel has {n} sensors but sensor set has {}",
            sensors.len()
        )));
    }
    if spec.h == 0 {
        return Err(SatcnError::invalid("window length h must be at least 1"));
    }
    let width = spec.h + spec.u;
    if p < width {
        return Err(SatcnError::invalid(format!(
            "panel has {p} steps, need at least h + u = {width}"
        )));
    }
    if spec.n_masked >= n {
        return Err(SatcnError::invalid(format!(
            "n_m = {} must be below the sensor count {n}",
            spec.n_masked
        )));
    }
    let full_graph = match full_graph {
        Some(g) if g.n_nodes() == n => g,
        Some(g) => {
            return Err(SatcnError::shape(format!(
                "full graph has {} nodes, panel has {n}",
                g.n_nodes()
            )))
        }
        None => Arc::new(build_full_adjacency(sensors, spec.k)?),
    };
    let normalized = norm.normalize_panel(panel);
    let last_start = p - width;

    let mut samples = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let start = rng.gen_range(0..=last_start);
        let mut omega = index::sample(rng, n, spec.n_masked).into_vec();
        omega.sort_unstable();
        let mut masked = vec![false; n];
        for &i in &omega {
            masked[i] = true;
        }

        let window = s![.., start..start + width];
        let mut input = normalized.slice(window).to_owned();
        for &i in &omega {
            input.row_mut(i).fill(0.0);
        }
        let observed: ArrayView2<'_, bool> = panel.obs_mask.slice(window);
        let masked_graphs = GraphSchedule::masked_window(sensors, spec.k, &masked, observed)?;

        let target_cols = s![.., start + spec.u..start + width];
        let target = normalized.slice(target_cols).to_owned();
        let eval_mask = panel.obs_mask.slice(target_cols).to_owned();

        samples.push(TrainingSample {
            start,
            input,
            target,
            masked_graphs,
            full_graph: GraphSchedule::Static(Arc::clone(&full_graph)),
            omega,
            eval_mask,
        });
    }
    Ok(TrainingBatch { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_distance_matrix, Metric};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, p: usize) -> (TimeSeriesPanel, SensorSet) {
        let coords: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, (i * i % 7) as f64]).collect();
        let s = build_distance_matrix(&coords, Metric::Euclidean).unwrap();
        let values = Array2::from_shape_fn((n, p), |(i, j)| (i * 10 + j) as f64 + 0.5);
        (TimeSeriesPanel::fully_observed(values).unwrap(), s)
    }

    fn spec(h: usize, u: usize, n_masked: usize, batch_size: usize) -> BatchSpec {
        BatchSpec {
            h,
            u,
            k: 2,
            n_masked,
            batch_size,
        }
    }

    #[test]
    fn no_mask_reproduces_window() {
        let (panel, s) = setup(5, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = generate_training_batch(&panel, &s, &Normalization::IDENTITY, &spec(4, 2, 0, 3), None, &mut rng)
            .unwrap();
        for smp in &b.samples {
            assert!(smp.omega.is_empty());
            assert_eq!(smp.input, panel.values.slice(s![.., smp.start..smp.start + 6]));
        }
    }

    #[test]
    fn exact_length_has_single_window() {
        let (panel, s) = setup(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = generate_training_batch(&panel, &s, &Normalization::IDENTITY, &spec(4, 2, 1, 8), None, &mut rng)
            .unwrap();
        assert!(b.samples.iter().all(|smp| smp.start == 0));
    }

    #[test]
    fn precondition_errors() {
        let (panel, s) = setup(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Normalization::IDENTITY;
        assert!(generate_training_batch(&panel, &s, &id, &spec(4, 2, 1, 1), None, &mut rng).is_err());
        assert!(generate_training_batch(&panel, &s, &id, &spec(2, 1, 4, 1), None, &mut rng).is_err());
        assert!(generate_training_batch(&panel, &s, &id, &spec(0, 1, 1, 1), None, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_batch() {
        let (panel, s) = setup(5, 30);
        let sp = spec(4, 2, 2, 4);
        let norm = Normalization::fit(&panel).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate_training_batch(&panel, &s, &norm, &sp, None, &mut rng).unwrap()
        };
        let (a, b) = (run(9), run(9));
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.start, y.start);
            assert_eq!(x.omega, y.omega);
            let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.input), bits(&y.input));
            assert_eq!(bits(&x.target), bits(&y.target));
        }
    }

    #[test]
    fn zeroing_alignment_and_coverage() {
        let (mut panel, s) = setup(6, 12);
        panel.obs_mask[[3, 7]] = false;
        let norm = Normalization::fit(&panel).unwrap();
        let normalized = norm.normalize_panel(&panel);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sp = spec(3, 2, 2, 400);
        let b = generate_training_batch(&panel, &s, &norm, &sp, None, &mut rng).unwrap();
        let mut seen = vec![false; 12 - 5 + 1];
        for smp in &b.samples {
            seen[smp.start] = true;
            assert_eq!(smp.omega.len(), 2);
            for &i in &smp.omega {
                assert!(smp.input.row(i).iter().all(|&v| v == 0.0));
                for t in 0..5 {
                    assert!(!smp.masked_graphs.at(t).sends(i));
                }
            }
            for i in 0..6 {
                for c in 0..3 {
                    let col = smp.start + 2 + c;
                    assert_eq!(smp.eval_mask[[i, c]], panel.obs_mask[[i, col]]);
                    if panel.obs_mask[[i, col]] {
                        assert_eq!(smp.target[[i, c]], normalized[[i, col]]);
                    }
                }
            }
            // the unobserved cell never sends in its column
            if (smp.start..smp.start + 5).contains(&7) {
                assert!(!smp.masked_graphs.at(7 - smp.start).sends(3));
            }
        }
        assert!(seen.iter().all(|&x| x), "every legal start should occur");
    }

    #[test]
    fn normalization_ignores_unobserved() {
        let values = ndarray::array![[1.0, 3.0, 1e9]];
        let mask = ndarray::array![[true, true, false]];
        let panel = TimeSeriesPanel::new(vec!["a".into()], vec!["0".into(), "1".into(), "2".into()], values, mask)
            .unwrap();
        let norm = Normalization::fit(&panel).unwrap();
        assert_eq!(norm.mean, 2.0);
        assert_eq!(norm.std, 1.0);
        let constant = TimeSeriesPanel::fully_observed(Array2::from_elem((2, 3), 4.0)).unwrap();
        let norm = Normalization::fit(&constant).unwrap();
        assert_eq!((norm.mean, norm.std), (4.0, 1.0));
    }
}
