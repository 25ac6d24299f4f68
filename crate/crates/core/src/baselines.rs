//! kNN interpolation baseline, error metrics and train/test scenarios.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatcnError};
use crate::graph::SensorSet;
use crate::sampling::TimeSeriesPanel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

/// RMSE and MAE over the cells selected by `eval_mask`.
pub fn evaluate(
    pred: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    eval_mask: ArrayView2<'_, bool>,
) -> Result<MetricReport> {
    if pred.dim() != truth.dim() || pred.dim() != eval_mask.dim() {
        return Err(SatcnError::shape(format!(
            "metric inputs differ in shape: {:?}, {:?}, {:?}",
            pred.dim(),
            truth.dim(),
            eval_mask.dim()
        )));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth.iter()).zip(eval_mask.iter()) {
        if m {
            let e = p - t;
            abs += e.abs();
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(SatcnError::invalid("evaluation mask is empty"));
    }
    Ok(MetricReport {
        rmse: (sq / count as f64).sqrt(),
        mae: abs / count as f64,
        count,
    })
}

/// Per unknown node and time step, the plain mean of the `k` nearest
/// sensors observed at that step (all of them when fewer are available).
///
/// `observed` is matched to `s` by sensor id. Returns `|unknown| x T`.
pub fn knn_interpolate(
    observed: &TimeSeriesPanel,
    s: &SensorSet,
    unknown: &[usize],
    k: usize,
) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(SatcnError::invalid("K must be at least 1"));
    }
    let panel = observed.align_to(s);
    let t_len = panel.n_steps();
    let mut out = Array2::zeros((unknown.len(), t_len));
    for (r, &j) in unknown.iter().enumerate() {
        if j >= s.len() {
            return Err(SatcnError::invalid(format!("unknown node {j} out of range")));
        }
        let order: Vec<usize> = s.nearest_order(j).filter(|&i| i != j).collect();
        for t in 0..t_len {
            let mut sum = 0.0;
            let mut used = 0usize;
            for &i in &order {
                if panel.obs_mask[[i, t]] {
                    sum += panel.values[[i, t]];
                    used += 1;
                    if used == k {
                        break;
                    }
                }
            }
            if used == 0 {
                return Err(SatcnError::invalid(format!(
                    "no observed sensor available for node {j} at step {t}"
                )));
            }
            out[[r, t]] = sum / used as f64;
        }
    }
    Ok(out)
}

/// Temporal and spatial split with optional missingness injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Leading share of time steps used for training.
    pub train_time_fraction: f64,
    /// Share of sensors used for training.
    pub train_sensor_fraction: f64,
    /// Share of observed training cells hidden before training.
    #[serde(default)]
    pub missing_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    /// Parses names like `7T8S` or `5T5S5M`: digits are tenths of time,
    /// sensors and injected missingness.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        let bad = || SatcnError::Config(format!("cannot parse scenario name {name:?}"));
        let mut time = None;
        let mut sensors = None;
        let mut missing = 0.0;
        let mut chars = name.trim().chars();
        while let Some(c) = chars.next() {
            let d = c.to_digit(10).ok_or_else(bad)? as f64 / 10.0;
            match chars.next().map(|c| c.to_ascii_uppercase()) {
                Some('T') if time.is_none() => time = Some(d),
                Some('S') if sensors.is_none() => sensors = Some(d),
                Some('M') => missing = d,
                _ => return Err(bad()),
            }
        }
        let spec = ScenarioSpec {
            train_time_fraction: time.ok_or_else(bad)?,
            train_sensor_fraction: sensors.ok_or_else(bad)?,
            missing_ratio: missing,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.train_time_fraction) || !open(self.train_sensor_fraction) {
            return Err(SatcnError::Config("scenario fractions must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.missing_ratio) {
            return Err(SatcnError::Config("missing ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    /// Training sensors over the training steps, after missingness injection.
    pub train_panel: TimeSeriesPanel,
    pub train_sensors: SensorSet,
    /// Every sensor over the test steps.
    pub test_panel: TimeSeriesPanel,
    pub all_sensors: SensorSet,
    /// Indices into `all_sensors`.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Cells of `train_panel` hidden by injection.
    pub injected: Array2<bool>,
    pub split_step: usize,
}

impl Scenario {
    /// The test period as seen at inference: training sensors only.
    pub fn test_observed(&self) -> Result<TimeSeriesPanel> {
        self.test_panel.select_sensors(&self.train_indices)
    }

    /// Ground truth and mask for the test sensors over the test period.
    pub fn test_truth(&self) -> (Array2<f64>, Array2<bool>) {
        let sel = self.test_panel.select_sensors(&self.test_indices).expect("indices in range");
        (sel.values, sel.obs_mask)
    }
}

/// Splits `panel` (aligned to `s`) into a training and a test part.
pub fn make_scenario(panel: &TimeSeriesPanel, s: &SensorSet, spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let panel = panel.align_to(s);
    let n = s.len();
    let t = panel.n_steps();
    let n_train = (spec.train_sensor_fraction * n as f64).floor() as usize;
    if n_train < 2 {
        return Err(SatcnError::invalid(format!("split leaves {n_train} training sensors; need at least 2")));
    }
    if n_train >= n {
        return Err(SatcnError::invalid("split leaves no test sensor"));
    }
    let split = (spec.train_time_fraction * t as f64).floor() as usize;
    if split == 0 || split >= t {
        return Err(SatcnError::invalid(format!("temporal split at {split} of {t} steps leaves an empty part")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_indices = rand::seq::index::sample(&mut rng, n, n_train).into_vec();
    train_indices.sort_unstable();
    let test_indices: Vec<usize> = (0..n).filter(|i| train_indices.binary_search(i).is_err()).collect();

    let mut train_panel = panel.select_sensors(&train_indices)?.select_steps(0..split)?;
    let mut injected = Array2::from_elem(train_panel.obs_mask.dim(), false);
    let observed: Vec<(usize, usize)> = train_panel
        .obs_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ix, _)| ix)
        .collect();
    let n_hide = (spec.missing_ratio * observed.len() as f64).floor() as usize;
    for ci in rand::seq::index::sample(&mut rng, observed.len(), n_hide) {
        let ix = observed[ci];
        injected[ix] = true;
        train_panel.obs_mask[ix] = false;
        train_panel.values[ix] = 0.0;
    }

    Ok(Scenario {
        train_panel,
        train_sensors: s.subset(&train_indices)?,
        test_panel: panel.select_steps(split..t)?,
        all_sensors: s.clone(),
        train_indices,
        test_indices,
        injected,
        split_step: split,
    })
}
