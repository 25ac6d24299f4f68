//! End-to-end scenario runs: split, train, krige the held-out sensors and
//! score SATCN next to the kNN baselines.

use ndarray::{s, Array2};

use crate::baselines::{evaluate, knn_interpolate, make_scenario, MetricReport, Scenario, ScenarioSpec};
use crate::error::Result;
use crate::graph::SensorSet;
use crate::model::{krige, train, ArchConfig, SatcnModel, TrainConfig, TrainHistory};
use crate::sampling::TimeSeriesPanel;

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub model: SatcnModel,
    pub history: TrainHistory,
    /// `|test| x (T_test - u)` estimates.
    pub estimates: Array2<f64>,
    pub satcn: MetricReport,
    /// `(K, report)` per baseline.
    pub knn: Vec<(usize, MetricReport)>,
}

impl ScenarioOutcome {
    pub fn best_knn(&self) -> Option<(usize, MetricReport)> {
        self.knn
            .iter()
            .copied()
            .min_by(|a, b| a.1.mae.total_cmp(&b.1.mae))
    }
}

/// Runs one scenario. Both methods are scored on the test sensors over test
/// steps `u..`, the steps SATCN can estimate.
pub fn run_scenario(
    panel: &TimeSeriesPanel,
    sensors: &SensorSet,
    spec: &ScenarioSpec,
    arch: &ArchConfig,
    train_cfg: &TrainConfig,
    knn_ks: &[usize],
) -> Result<ScenarioOutcome> {
    let scenario = make_scenario(panel, sensors, spec)?;
    let (model, history) = train(&scenario.train_panel, &scenario.train_sensors, train_cfg, arch)?;
    let observed = scenario.test_observed()?;
    let estimates = krige(&model, &observed, &scenario.all_sensors, &scenario.test_indices)?;

    let u = model.temporal_reduction();
    let (truth, mask) = scenario.test_truth();
    let truth = truth.slice(s![.., u..]);
    let mask = mask.slice(s![.., u..]);
    let satcn = evaluate(estimates.view(), truth, mask)?;
    let mut knn = Vec::with_capacity(knn_ks.len());
    for &k in knn_ks {
        let est = knn_interpolate(&observed, &scenario.all_sensors, &scenario.test_indices, k)?;
        knn.push((k, evaluate(est.slice(s![.., u..]), truth, mask)?));
    }
    Ok(ScenarioOutcome {
        scenario,
        model,
        history,
        estimates,
        satcn,
        knn,
    })
}
