//! Seeded synthetic fields: smooth radial bumps in space times sinusoids in
//! time, plus Gaussian noise.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatcnError};
use crate::graph::{build_distance_matrix, Metric, SensorSet};
use crate::sampling::TimeSeriesPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFieldSpec {
    pub n_sensors: usize,
    pub n_steps: usize,
    pub n_basis: usize,
    pub length_scale: f64,
    /// Cycles per step, one per basis function. Empty draws them from
    /// `frequency_range`.
    pub frequencies: Vec<f64>,
    pub frequency_range: (f64, f64),
    pub noise_std: f64,
    /// Read `noise_std` as a multiple of the noiseless signal's std.
    pub noise_relative: bool,
    pub seed: u64,
}

impl Default for SyntheticFieldSpec {
    fn default() -> Self {
        SyntheticFieldSpec {
            n_sensors: 50,
            n_steps: 2000,
            n_basis: 5,
            length_scale: 0.25,
            frequencies: Vec::new(),
            frequency_range: (0.005, 0.05),
            noise_std: 0.1,
            noise_relative: true,
            seed: 0,
        }
    }
}

impl SyntheticFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sensors < 4 {
            return Err(SatcnError::invalid("synthetic field needs at least 4 sensors"));
        }
        if self.n_steps == 0 || self.n_basis == 0 {
            return Err(SatcnError::invalid("synthetic field needs steps and basis functions"));
        }
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(SatcnError::invalid("length scale must be positive and finite"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(SatcnError::invalid("noise std must be non-negative"));
        }
        if !self.frequencies.is_empty() && self.frequencies.len() != self.n_basis {
            return Err(SatcnError::invalid(format!(
                "{} frequencies given for {} basis functions",
                self.frequencies.len(),
                self.n_basis
            )));
        }
        let (lo, hi) = self.frequency_range;
        if self.frequencies.is_empty() && !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SatcnError::invalid("frequency range must satisfy low <= high"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticField {
    pub sensors: SensorSet,
    /// Noisy observations, fully observed.
    pub panel: TimeSeriesPanel,
    /// The noiseless signal.
    pub truth: Array2<f64>,
    /// Absolute noise std actually applied.
    pub noise_std: f64,
}

pub fn generate_synthetic(spec: &SyntheticFieldSpec) -> Result<SyntheticField> {
    spec.validate()?;
    // structure and noise use separate streams so the noise level does not
    // change the field
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);

    let coords: Vec<[f64; 2]> = (0..spec.n_sensors).map(|_| [rng.gen(), rng.gen()]).collect();
    let sensors = build_distance_matrix(&coords, Metric::Euclidean)?;

    let centers: Vec<[f64; 2]> = (0..spec.n_basis).map(|_| [rng.gen(), rng.gen()]).collect();
    let freqs: Vec<f64> = if spec.frequencies.is_empty() {
        let (lo, hi) = spec.frequency_range;
        (0..spec.n_basis).map(|_| if lo < hi { rng.gen_range(lo..hi) } else { lo }).collect()
    } else {
        spec.frequencies.clone()
    };
    let phases: Vec<f64> = (0..spec.n_basis)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let two_l2 = 2.0 * spec.length_scale * spec.length_scale;
    let spatial = Array2::from_shape_fn((spec.n_sensors, spec.n_basis), |(i, b)| {
        let dx = coords[i][0] - centers[b][0];
        let dy = coords[i][1] - centers[b][1];
        (-(dx * dx + dy * dy) / two_l2).exp()
    });
    let temporal = Array2::from_shape_fn((spec.n_basis, spec.n_steps), |(b, t)| {
        (std::f64::consts::TAU * freqs[b] * t as f64 + phases[b]).sin()
    });
    let truth = spatial.dot(&temporal);

    let noise_std = if spec.noise_relative {
        let mean = truth.mean().unwrap_or(0.0);
        let var = truth.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
        spec.noise_std * var.sqrt()
    } else {
        spec.noise_std
    };
    let mut values = truth.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| SatcnError::invalid(e.to_string()))?;
        values.mapv_inplace(|v| v + normal.sample(&mut noise_rng));
    }

    let mut panel = TimeSeriesPanel::fully_observed(values)?;
    panel.ids = sensors.ids().to_vec();
    Ok(SyntheticField {
        sensors,
        panel,
        truth,
        noise_std,
    })
}
