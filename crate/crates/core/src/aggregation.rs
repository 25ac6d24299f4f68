//! Spatial aggregation layer.
//!
//! Every receiver summarizes the messages of its senders with seven
//! aggregators, in this fixed order:
//!
//! | index | aggregator | depends on |
//! |-------|------------|------------|
//! | 0 | mean | features |
//! | 1 | weighted mean | features, weights |
//! | 2 | softmax | features |
//! | 3 | softmin | features |
//! | 4 | standard deviation | features |
//! | 5 | mean distance weight | weights |
//! | 6 | standard deviation of distance weights | weights |
//!
//! Each aggregate is then multiplied by three degree scalers (identity,
//! amplification, attenuation) and the 21 results are stacked. The stacked
//! feature index of (scaler `s`, aggregator `a`, channel `c`) is
//! `(s * 7 + a) * c_in + c`; weight matrices trained here are portable only
//! under that ordering.
//!
//! A receiver without senders produces zeros for all seven aggregators.
//! A receiver whose incoming weight sum is zero gets amplification factor 0
//! and attenuation output 0.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dense::{dense_forward, Activation};
use crate::error::{Result, SatcnError};
use crate::graph::{GraphSchedule, NeighborGraph};

pub const N_AGGREGATORS: usize = 7;
pub const N_SCALERS: usize = 3;
pub const STACK_WIDTH: usize = N_AGGREGATORS * N_SCALERS;

/// Default variance floor of the two standard-deviation aggregators.
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    WeightedMean,
    Softmax,
    Softmin,
    Std,
    MeanDistance,
    StdDistance,
}

impl Aggregator {
    pub const ALL: [Aggregator; N_AGGREGATORS] = [
        Aggregator::Mean,
        Aggregator::WeightedMean,
        Aggregator::Softmax,
        Aggregator::Softmin,
        Aggregator::Std,
        Aggregator::MeanDistance,
        Aggregator::StdDistance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaler {
    Identity,
    Amplification,
    Attenuation,
}

impl Scaler {
    pub const ALL: [Scaler; N_SCALERS] = [Scaler::Identity, Scaler::Amplification, Scaler::Attenuation];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which aggregators and scalers contribute. Disabled entries stay in the
/// stack as zeros so weight shapes do not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMask {
    pub aggregators: [bool; N_AGGREGATORS],
    pub scalers: [bool; N_SCALERS],
}

impl Default for StackMask {
    fn default() -> Self {
        StackMask {
            aggregators: [true; N_AGGREGATORS],
            scalers: [true; N_SCALERS],
        }
    }
}

impl StackMask {
    pub fn only(aggregators: &[Aggregator], scalers: &[Scaler]) -> Self {
        let mut mask = StackMask {
            aggregators: [false; N_AGGREGATORS],
            scalers: [false; N_SCALERS],
        };
        for a in aggregators {
            mask.aggregators[a.index()] = true;
        }
        for s in scalers {
            mask.scalers[s.index()] = true;
        }
        mask
    }
}

/// Parameters of one spatial aggregation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SanLayerParams {
    /// `c_out x (21 * c_in)`.
    pub phi: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub epsilon: f64,
    pub deg: f64,
    pub mask: StackMask,
}

impl SanLayerParams {
    pub fn c_in(&self) -> usize {
        self.phi.ncols() / STACK_WIDTH
    }

    pub fn c_out(&self) -> usize {
        self.phi.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.ncols() % STACK_WIDTH != 0 || self.phi.ncols() == 0 {
            return Err(SatcnError::shape(format!(
                "phi has {} columns, expected a positive multiple of {STACK_WIDTH}",
                self.phi.ncols()
            )));
        }
        if self.bias.len() != self.phi.nrows() {
            return Err(SatcnError::shape(format!(
                "bias length {} != c_out {}",
                self.bias.len(),
                self.phi.nrows()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(SatcnError::invalid("epsilon must be positive"));
        }
        if !(self.deg > 0.0) {
            return Err(SatcnError::invalid("deg must be positive"));
        }
        Ok(())
    }
}

/// Average over receivers of `ln(sum of incoming weights + 1)`.
pub fn compute_deg(full_graph: &NeighborGraph) -> Result<f64> {
    let n = full_graph.n_nodes();
    if n == 0 || full_graph.edge_count() == 0 {
        return Err(SatcnError::invalid("cannot compute deg of an empty graph"));
    }
    let deg = (0..n)
        .map(|i| full_graph.incoming_weight_sum(i).ln_1p())
        .sum::<f64>()
        / n as f64;
    if !(deg > 0.0) {
        return Err(SatcnError::invalid(format!(
            "degenerate graph: deg = {deg} (all incoming weights are zero)"
        )));
    }
    Ok(deg)
}

/// `(amplification, attenuation)` multipliers of receiver `j`.
pub fn scaler_factors(g: &NeighborGraph, j: usize, deg: f64) -> (f64, f64) {
    let l = g.incoming_weight_sum(j).ln_1p();
    if l > 0.0 {
        (l / deg, deg / l)
    } else {
        (0.0, 0.0)
    }
}

// Per-receiver reductions over the neighbour set, one channel at a time.
struct ChannelStats {
    mean: f64,
    wmean: f64,
    softmax: f64,
    softmin: f64,
    std: f64,
    var: f64,
}

struct Neighborhood<'a> {
    senders: &'a [crate::graph::Edge],
    count: f64,
    wsum: f64,
    mean_w: f64,
    std_w: f64,
}

impl<'a> Neighborhood<'a> {
    fn new(g: &'a NeighborGraph, j: usize, eps: f64) -> Self {
        let senders = g.neighbors(j);
        let count = senders.len() as f64;
        let wsum: f64 = senders.iter().map(|e| e.weight).sum();
        let (mean_w, std_w) = if senders.is_empty() {
            (0.0, 0.0)
        } else {
            let mean_w = wsum / count;
            let sq = senders.iter().map(|e| e.weight * e.weight).sum::<f64>() / count;
            (mean_w, ((sq - mean_w * mean_w).max(0.0) + eps).sqrt())
        };
        Neighborhood {
            senders,
            count,
            wsum,
            mean_w,
            std_w,
        }
    }

    fn stats(&self, value: impl Fn(usize) -> f64, eps: f64) -> ChannelStats {
        let mut sum = 0.0;
        let mut wsum_x = 0.0;
        let mut sq = 0.0;
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for e in self.senders {
            let x = value(e.sender);
            sum += x;
            wsum_x += e.weight * x;
            sq += x * x;
            hi = hi.max(x);
            lo = lo.min(x);
        }
        let mean = sum / self.count;
        let wmean = if self.wsum > 0.0 { wsum_x / self.wsum } else { mean };
        let (mut z_max, mut n_max, mut z_min, mut n_min) = (0.0, 0.0, 0.0, 0.0);
        for e in self.senders {
            let x = value(e.sender);
            let a = (x - hi).exp();
            let b = (lo - x).exp();
            z_max += a;
            n_max += a * x;
            z_min += b;
            n_min += b * x;
        }
        let var = sq / self.count - mean * mean;
        ChannelStats {
            mean,
            wmean,
            softmax: n_max / z_max,
            softmin: n_min / z_min,
            std: (var.max(0.0) + eps).sqrt(),
            var,
        }
    }
}

/// Seven aggregates for every node and channel: `n x 7 x c`.
pub fn aggregate(features: ndarray::ArrayView2<'_, f64>, g: &NeighborGraph, eps: f64) -> Result<Array3<f64>> {
    let (n, c) = features.dim();
    if n != g.n_nodes() {
        return Err(SatcnError::shape(format!(
            "{n} feature rows for a {}-node graph",
            g.n_nodes()
        )));
    }
    let mut out = Array3::zeros((n, N_AGGREGATORS, c));
    for j in 0..n {
        let nb = Neighborhood::new(g, j, eps);
        if nb.senders.is_empty() {
            continue;
        }
        for ch in 0..c {
            let st = nb.stats(|i| features[[i, ch]], eps);
            let vals = [st.mean, st.wmean, st.softmax, st.softmin, st.std, nb.mean_w, nb.std_w];
            for (a, v) in vals.into_iter().enumerate() {
                out[[j, a, ch]] = v;
            }
        }
    }
    Ok(out)
}

/// Applies the three scalers: `n x 7 x c` to `n x 21 x c`, scaler-major.
pub fn scale(agg: &Array3<f64>, g: &NeighborGraph, deg: f64) -> Result<Array3<f64>> {
    let (n, a, c) = agg.dim();
    if a != N_AGGREGATORS || n != g.n_nodes() {
        return Err(SatcnError::shape(format!("aggregate tensor {:?} for {} nodes", agg.dim(), g.n_nodes())));
    }
    if !(deg > 0.0) {
        return Err(SatcnError::invalid("deg must be positive"));
    }
    let mut out = Array3::zeros((n, STACK_WIDTH, c));
    for j in 0..n {
        let (amp, att) = scaler_factors(g, j, deg);
        for (s, factor) in [1.0, amp, att].into_iter().enumerate() {
            for ai in 0..N_AGGREGATORS {
                for ch in 0..c {
                    out[[j, s * N_AGGREGATORS + ai, ch]] = factor * agg[[j, ai, ch]];
                }
            }
        }
    }
    Ok(out)
}

fn check_schedule(x: &ArrayView3<'_, f64>, sched: &GraphSchedule) -> Result<()> {
    let (n, t, _) = x.dim();
    if sched.n_nodes() != n {
        return Err(SatcnError::shape(format!("{n} nodes but graph has {}", sched.n_nodes())));
    }
    if let Some(steps) = sched.steps() {
        if steps != t {
            return Err(SatcnError::shape(format!("{t} time steps but {steps} per-step graphs")));
        }
    }
    Ok(())
}

/// Stacked features of a spatiotemporal tensor: `n x T x c` to
/// `n x T x (21 * c)`, each time slice aggregated over its own graph.
pub fn stack_features(
    x: ArrayView3<'_, f64>,
    sched: &GraphSchedule,
    deg: f64,
    eps: f64,
    mask: &StackMask,
) -> Result<Array3<f64>> {
    check_schedule(&x, sched)?;
    let (n, t, c) = x.dim();
    let mut out = Array3::zeros((n, t, STACK_WIDTH * c));
    for tt in 0..t {
        let g = sched.at(tt);
        for j in 0..n {
            let nb = Neighborhood::new(g, j, eps);
            if nb.senders.is_empty() {
                continue;
            }
            let (amp, att) = scaler_factors(g, j, deg);
            let factors = [1.0, amp, att];
            let mut row = out.slice_mut(ndarray::s![j, tt, ..]);
            for ch in 0..c {
                let st = nb.stats(|i| x[[i, tt, ch]], eps);
                let vals = [st.mean, st.wmean, st.softmax, st.softmin, st.std, nb.mean_w, nb.std_w];
                for (s, &f) in factors.iter().enumerate() {
                    if !mask.scalers[s] {
                        continue;
                    }
                    for (a, &v) in vals.iter().enumerate() {
                        if mask.aggregators[a] {
                            row[(s * N_AGGREGATORS + a) * c + ch] = f * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`stack_features`] with respect to `x`.
pub fn stack_features_backward(
    x: ArrayView3<'_, f64>,
    sched: &GraphSchedule,
    deg: f64,
    eps: f64,
    mask: &StackMask,
    grad_out: ArrayView3<'_, f64>,
) -> Result<Array3<f64>> {
    check_schedule(&x, sched)?;
    let (n, t, c) = x.dim();
    if grad_out.dim() != (n, t, STACK_WIDTH * c) {
        return Err(SatcnError::shape("gradient does not match stacked shape"));
    }
    let mut grad_x = Array3::zeros((n, t, c));
    for tt in 0..t {
        let g = sched.at(tt);
        for j in 0..n {
            let nb = Neighborhood::new(g, j, eps);
            if nb.senders.is_empty() {
                continue;
            }
            let (amp, att) = scaler_factors(g, j, deg);
            let factors = [1.0, amp, att];
            for ch in 0..c {
                // Fold the three scaled copies into one gradient per aggregator.
                let mut ga = [0.0; 5];
                for (s, &f) in factors.iter().enumerate() {
                    if !mask.scalers[s] {
                        continue;
                    }
                    for (a, slot) in ga.iter_mut().enumerate() {
                        if mask.aggregators[a] {
                            *slot += f * grad_out[[j, tt, (s * N_AGGREGATORS + a) * c + ch]];
                        }
                    }
                }
                if ga.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let st = nb.stats(|i| x[[i, tt, ch]], eps);
                let hi = nb.senders.iter().map(|e| x[[e.sender, tt, ch]]).fold(f64::NEG_INFINITY, f64::max);
                let lo = nb.senders.iter().map(|e| x[[e.sender, tt, ch]]).fold(f64::INFINITY, f64::min);
                let z_max: f64 = nb.senders.iter().map(|e| (x[[e.sender, tt, ch]] - hi).exp()).sum();
                let z_min: f64 = nb.senders.iter().map(|e| (lo - x[[e.sender, tt, ch]]).exp()).sum();
                for e in nb.senders {
                    let xi = x[[e.sender, tt, ch]];
                    let mut d = ga[0] / nb.count;
                    d += if nb.wsum > 0.0 {
                        ga[1] * e.weight / nb.wsum
                    } else {
                        ga[1] / nb.count
                    };
                    let p = (xi - hi).exp() / z_max;
                    d += ga[2] * p * (1.0 + xi - st.softmax);
                    let q = (lo - xi).exp() / z_min;
                    d += ga[3] * q * (1.0 - xi + st.softmin);
                    if st.var > 0.0 {
                        d += ga[4] * (xi - st.mean) / (nb.count * st.std);
                    }
                    grad_x[[e.sender, tt, ch]] += d;
                }
            }
        }
    }
    Ok(grad_x)
}

/// One spatial aggregation layer applied at every time slice with shared
/// weights: `n x T x c_in` to `n x T x c_out`.
pub fn san_forward(x: ArrayView3<'_, f64>, sched: &GraphSchedule, p: &SanLayerParams) -> Result<Array3<f64>> {
    p.validate()?;
    let (n, t, c) = x.dim();
    if c != p.c_in() {
        return Err(SatcnError::shape(format!("input has {c} channels, layer expects {}", p.c_in())));
    }
    let stacked = stack_features(x, sched, p.deg, p.epsilon, &p.mask)?;
    let flat = stacked
        .into_shape_with_order((n * t, STACK_WIDTH * c))
        .map_err(|e| SatcnError::shape(e.to_string()))?;
    let mut y = dense_forward(flat.view(), p.phi.view(), p.bias.view());
    p.activation.apply_inplace(&mut y);
    y.into_shape_with_order((n, t, p.c_out()))
        .map_err(|e| SatcnError::shape(e.to_string()))
}

/// Stacked features of a single time slice, `n x 21 x c` (convenience for
/// inspection and tests).
pub fn stack_slice(features: ndarray::ArrayView2<'_, f64>, g: &NeighborGraph, deg: f64, eps: f64) -> Result<Array3<f64>> {
    let agg = aggregate(features, g, eps)?;
    scale(&agg, g, deg)
}
