//! The SATCN network: alternating spatial aggregation and temporal
//! convolution blocks, a per-point output projection, training and kriging.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    compute_deg, san_forward, Aggregator, SanLayerParams, Scaler, StackMask, DEFAULT_EPSILON, STACK_WIDTH,
};
use crate::autodiff::{NodeId, Tape};
use crate::dense::{dense_forward, Activation};
use crate::error::{Result, SatcnError};
use crate::graph::{build_full_adjacency, GraphSchedule, NeighborGraph, SensorSet};
use crate::sampling::{generate_training_batch, BatchSpec, Normalization, TimeSeriesPanel};
use crate::tcn::{tcn_forward, TcnLayerParams};

/// Version written into every model file.
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"SATCNMDL";

/// Network shape and sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Neighbours per receiver.
    pub k: usize,
    /// Output width of each spatial block.
    pub channels: Vec<usize>,
    /// Kernel width of the temporal block following each spatial block.
    pub tcn_widths: Vec<usize>,
    /// Output window length used in training.
    pub h: usize,
    /// Nodes simulated as unknown per sample; `None` picks `max(1, n / 20)`.
    pub n_masked: Option<usize>,
    pub epsilon: f64,
    pub aggregators: Vec<Aggregator>,
    pub scalers: Vec<Scaler>,
    /// Restrict the loss to the simulated unknown nodes.
    pub loss_on_masked_only: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            k: 3,
            channels: vec![32, 32],
            tcn_widths: vec![2, 2],
            h: 6,
            n_masked: None,
            epsilon: DEFAULT_EPSILON,
            aggregators: Aggregator::ALL.to_vec(),
            scalers: Scaler::ALL.to_vec(),
            loss_on_masked_only: false,
        }
    }
}

impl ArchConfig {
    /// Total temporal reduction `Σ (w - 1)`.
    pub fn temporal_reduction(&self) -> usize {
        self.tcn_widths.iter().map(|w| w.saturating_sub(1)).sum()
    }

    pub fn stack_mask(&self) -> StackMask {
        StackMask::only(&self.aggregators, &self.scalers)
    }

    pub fn n_masked_for(&self, n: usize) -> usize {
        self.n_masked.unwrap_or((n / 20).max(1)).min(n.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SatcnError::Config("k must be at least 1".into()));
        }
        if self.channels.is_empty() || self.channels.len() != self.tcn_widths.len() {
            return Err(SatcnError::Config(format!(
                "need one kernel width per spatial block: {} channels, {} widths",
                self.channels.len(),
                self.tcn_widths.len()
            )));
        }
        if self.channels.contains(&0) || self.tcn_widths.contains(&0) {
            return Err(SatcnError::Config("channel counts and kernel widths must be positive".into()));
        }
        if self.h == 0 {
            return Err(SatcnError::Config("h must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(SatcnError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Optimizer steps.
    pub iterations: usize,
    /// Samples per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Share of training sensors held out as pseudo-unknown for validation.
    pub validation_fraction: f64,
    /// Steps between validation passes.
    pub validation_every: usize,
    /// Validation passes without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Trailing time steps used for validation; 0 uses all.
    pub validation_steps: usize,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            iterations: 1000,
            batch_size: 8,
            seed: 0,
            validation_fraction: 0.1,
            validation_every: 50,
            patience: 0,
            validation_steps: 400,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(SatcnError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SatcnError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(SatcnError::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SatcnError::Config("Adam moment coefficients must lie in [0, 1)".into()));
        }
        if self.validation_every == 0 {
            return Err(SatcnError::Config("validation_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    San(SanLayerParams),
    Tcn(TcnLayerParams),
}

/// A trained (or initialized) network with everything needed to krige.
#[derive(Debug, Clone, PartialEq)]
pub struct SatcnModel {
    pub config: ArchConfig,
    pub blocks: Vec<Block>,
    /// `1 x c_last`.
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub deg: f64,
    pub norm: Normalization,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

impl SatcnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ArchConfig, deg: f64, norm: Normalization, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(deg > 0.0) {
            return Err(SatcnError::invalid("deg must be positive"));
        }
        let mask = config.stack_mask();
        let mut blocks = Vec::with_capacity(2 * config.channels.len());
        let mut c_in = 1;
        for (&c_out, &w) in config.channels.iter().zip(&config.tcn_widths) {
            let phi = glorot(rng, &[c_out, STACK_WIDTH * c_in], STACK_WIDTH * c_in, c_out);
            blocks.push(Block::San(SanLayerParams {
                phi: phi.into_dimensionality().expect("2-D"),
                bias: Array1::zeros(c_out),
                activation: Activation::Relu,
                epsilon: config.epsilon,
                deg,
                mask,
            }));
            let kernel = glorot(rng, &[w, c_out, c_out], w * c_out, w * c_out);
            blocks.push(Block::Tcn(TcnLayerParams {
                kernel: kernel.into_dimensionality().expect("3-D"),
                bias: Array1::zeros(c_out),
            }));
            c_in = c_out;
        }
        let proj_w = glorot(rng, &[1, c_in], c_in, 1).into_dimensionality().expect("2-D");
        Ok(SatcnModel {
            config: config.clone(),
            blocks,
            proj_w,
            proj_b: Array1::zeros(1),
            deg,
            norm,
            seed: None,
            config_hash: None,
        })
    }

    pub fn temporal_reduction(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Tcn(t) => t.width() - 1,
                Block::San(_) => 0,
            })
            .sum()
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::San(p) => {
                    out.push((format!("block{i}.san.phi"), p.phi.clone().into_dyn()));
                    out.push((format!("block{i}.san.bias"), p.bias.clone().into_dyn()));
                }
                Block::Tcn(p) => {
                    out.push((format!("block{i}.tcn.kernel"), p.kernel.clone().into_dyn()));
                    out.push((format!("block{i}.tcn.bias"), p.bias.clone().into_dyn()));
                }
            }
        }
        out.push(("proj.weight".into(), self.proj_w.clone().into_dyn()));
        out.push(("proj.bias".into(), self.proj_b.clone().into_dyn()));
        out
    }

    pub fn param_tensors(&self) -> Vec<ArrayD<f64>> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn set_params(&mut self, tensors: &[ArrayD<f64>]) -> Result<()> {
        let expected = 2 * self.blocks.len() + 2;
        if tensors.len() != expected {
            return Err(SatcnError::shape(format!("expected {expected} tensors, got {}", tensors.len())));
        }
        fn fit<D: ndarray::Dimension>(dst: &mut ndarray::Array<f64, D>, src: &ArrayD<f64>) -> Result<()> {
            if dst.shape() != src.shape() {
                return Err(SatcnError::shape(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(&src.view().into_dimensionality::<D>().expect("same rank"));
            Ok(())
        }
        let mut it = tensors.iter();
        for b in &mut self.blocks {
            match b {
                Block::San(p) => {
                    fit(&mut p.phi, it.next().expect("counted"))?;
                    fit(&mut p.bias, it.next().expect("counted"))?;
                }
                Block::Tcn(p) => {
                    fit(&mut p.kernel, it.next().expect("counted"))?;
                    fit(&mut p.bias, it.next().expect("counted"))?;
                }
            }
        }
        fit(&mut self.proj_w, it.next().expect("counted"))?;
        fit(&mut self.proj_b, it.next().expect("counted"))?;
        Ok(())
    }

    fn check_structure(&self) -> Result<()> {
        match self.blocks.first() {
            Some(Block::San(_)) => Ok(()),
            _ => Err(SatcnError::invalid("the first block must be a spatial aggregation layer")),
        }
    }

    /// Forward pass in normalized units: `n x T` to `n x (T - u)`.
    pub fn forward_normalized(
        &self,
        x: ArrayView2<'_, f64>,
        masked: &GraphSchedule,
        full: &GraphSchedule,
    ) -> Result<Array2<f64>> {
        self.check_structure()?;
        let (n, t) = x.dim();
        let u = self.temporal_reduction();
        if t <= u {
            return Err(SatcnError::invalid(format!("input length {t} must exceed the temporal reduction {u}")));
        }
        if masked.n_nodes() != n || full.n_nodes() != n {
            return Err(SatcnError::shape(format!(
                "{n} input rows, graphs over {} and {} nodes",
                masked.n_nodes(),
                full.n_nodes()
            )));
        }
        let mut h: Array3<f64> = x.to_owned().insert_axis(Axis(2));
        let mut first = true;
        for b in &self.blocks {
            h = match b {
                Block::San(p) => {
                    let g = if first { masked } else { full };
                    first = false;
                    san_forward(h.view(), g, p)?
                }
                Block::Tcn(p) => tcn_forward(h.view(), p)?,
            };
        }
        let (n, t_out, c) = h.dim();
        let flat = h.into_shape_with_order((n * t_out, c)).expect("contiguous");
        let y = dense_forward(flat.view(), self.proj_w.view(), self.proj_b.view());
        Ok(y.into_shape_with_order((n, t_out)).expect("contiguous"))
    }

    /// Records the forward pass on `tape`. Returns the `n x T' x 1` output node
    /// and the parameter nodes in [`SatcnModel::params`] order.
    pub fn forward_tape<'g>(
        &self,
        tape: &mut Tape<'g>,
        x: &Array2<f64>,
        masked: &'g GraphSchedule,
        full: &'g GraphSchedule,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_structure()?;
        let mut params = Vec::new();
        let mut h = tape.constant(x.clone().insert_axis(Axis(2)).into_dyn());
        let mut first = true;
        for b in &self.blocks {
            match b {
                Block::San(p) => {
                    let g = if first { masked } else { full };
                    first = false;
                    let w = tape.param(p.phi.clone().into_dyn());
                    let bias = tape.param(p.bias.clone().into_dyn());
                    params.extend([w, bias]);
                    let stacked = tape.stack(h, g, p.deg, p.epsilon, p.mask)?;
                    let lin = tape.dense(stacked, w, bias)?;
                    h = match p.activation {
                        Activation::Relu => tape.relu(lin)?,
                        Activation::Identity => lin,
                    };
                }
                Block::Tcn(p) => {
                    let k = tape.param(p.kernel.clone().into_dyn());
                    let bias = tape.param(p.bias.clone().into_dyn());
                    params.extend([k, bias]);
                    h = tape.conv(h, k, bias)?;
                }
            }
        }
        let w = tape.param(self.proj_w.clone().into_dyn());
        let b = tape.param(self.proj_b.clone().into_dyn());
        params.extend([w, b]);
        let out = tape.dense(h, w, b)?;
        Ok((out, params))
    }

    /// Estimates for every node over a long window, processed in time chunks
    /// (exact, since outputs only see `u + 1` input columns). Normalized units.
    fn forward_chunked(
        &self,
        x: &Array2<f64>,
        masked: &GraphSchedule,
        full: &GraphSchedule,
        chunk: usize,
    ) -> Result<Array2<f64>> {
        let (n, t) = x.dim();
        let u = self.temporal_reduction();
        if t <= u {
            return Err(SatcnError::invalid(format!("input length {t} must exceed the temporal reduction {u}")));
        }
        let t_out = t - u;
        let chunk = chunk.max(1);
        let mut out = Array2::zeros((n, t_out));
        let mut start = 0;
        while start < t_out {
            let end = (start + chunk).min(t_out);
            let sub_masked = match masked {
                GraphSchedule::Static(g) => GraphSchedule::Static(Arc::clone(g)),
                GraphSchedule::PerStep(gs) => GraphSchedule::PerStep(gs[start..end + u].to_vec()),
            };
            let y = self.forward_normalized(x.slice(s![.., start..end + u]), &sub_masked, full)?;
            out.slice_mut(s![.., start..end]).assign(&y);
            start = end;
        }
        Ok(out)
    }

    // ---- persistence ----

    /// Serializes the model: magic, format version, JSON header, then every
    /// tensor as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.params();
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            deg: self.deg,
            norm: self.norm,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::San(p) => BlockKind::San { activation: p.activation },
                    Block::Tcn(_) => BlockKind::Tcn,
                })
                .collect(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            byte_order: "little".into(),
            dtype: "f64".into(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| SatcnError::ModelFormat(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &params {
            for v in t.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SatcnError::ModelFormat(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != MODEL_FORMAT_VERSION {
            return Err(SatcnError::ModelFormat(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(body).map_err(|e| SatcnError::ModelFormat(e.to_string()))?;
        if header.byte_order != "little" || header.dtype != "f64" {
            return Err(bad("only little-endian f64 tensors are supported"));
        }
        let mut offset = 20 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * count)
                .ok_or_else(|| SatcnError::ModelFormat(format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(
                ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                    .map_err(|e| SatcnError::ModelFormat(e.to_string()))?,
            );
            offset += 8 * count;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }

        // Rebuild the block structure, then load the tensors into it.
        let mask = header.config.stack_mask();
        let mut blocks = Vec::with_capacity(header.blocks.len());
        let mut ti = 0;
        for kind in &header.blocks {
            let (a, b) = (
                tensors.get(ti).ok_or_else(|| bad("missing tensor"))?,
                tensors.get(ti + 1).ok_or_else(|| bad("missing tensor"))?,
            );
            ti += 2;
            blocks.push(match kind {
                BlockKind::San { activation } => Block::San(SanLayerParams {
                    phi: a.clone().into_dimensionality().map_err(|_| bad("phi must be 2-D"))?,
                    bias: b.clone().into_dimensionality().map_err(|_| bad("bias must be 1-D"))?,
                    activation: *activation,
                    epsilon: header.config.epsilon,
                    deg: header.deg,
                    mask,
                }),
                BlockKind::Tcn => Block::Tcn(TcnLayerParams {
                    kernel: a.clone().into_dimensionality().map_err(|_| bad("kernel must be 3-D"))?,
                    bias: b.clone().into_dimensionality().map_err(|_| bad("bias must be 1-D"))?,
                }),
            });
        }
        if tensors.len() != ti + 2 {
            return Err(bad("tensor count does not match the block list"));
        }
        let model = SatcnModel {
            config: header.config,
            blocks,
            proj_w: tensors[ti].clone().into_dimensionality().map_err(|_| bad("projection must be 2-D"))?,
            proj_b: tensors[ti + 1].clone().into_dimensionality().map_err(|_| bad("projection bias must be 1-D"))?,
            deg: header.deg,
            norm: header.norm,
            seed: header.seed,
            config_hash: header.config_hash,
        };
        model.check_structure()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum BlockKind {
    San { activation: Activation },
    Tcn,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ArchConfig,
    deg: f64,
    norm: Normalization,
    seed: Option<u64>,
    config_hash: Option<String>,
    blocks: Vec<BlockKind>,
    tensors: Vec<TensorEntry>,
    byte_order: String,
    dtype: String,
}

/// Full forward pass: normalized input `n x (h + u)` with masked rows
/// zeroed, output `n x h` in original units.
pub fn satcn_forward(
    x: ArrayView2<'_, f64>,
    a: &GraphSchedule,
    a_hat: &NeighborGraph,
    m: &SatcnModel,
) -> Result<Array2<f64>> {
    let full = GraphSchedule::Static(Arc::new(a_hat.clone()));
    let y = m.forward_normalized(x, a, &full)?;
    Ok(y.mapv(|z| m.norm.invert(z)))
}

/// Mean absolute error over cells where `eval_mask` is set.
pub fn mae_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, eval_mask: ArrayView2<'_, bool>) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != eval_mask.dim() {
        return Err(SatcnError::shape(format!(
            "loss shapes differ: {:?}, {:?}, {:?}",
            pred.dim(),
            target.dim(),
            eval_mask.dim()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, t), &m) in pred.iter().zip(target.iter()).zip(eval_mask.iter()) {
        if m {
            total += (p - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(SatcnError::invalid("evaluation mask selects no cell"));
    }
    Ok(total / count as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[ArrayD<f64>]) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            step: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

/// Per-step training loss and periodic validation error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `(iteration, validation MAE in original units)`.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: Option<usize>,
    pub validation_sensors: Vec<String>,
}

impl TrainHistory {
    /// `iteration,train_loss,val_mae` rows; `val_mae` is empty between passes.
    pub fn to_csv_rows(&self) -> Vec<[String; 3]> {
        self.train_loss
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let val = self
                    .validation
                    .iter()
                    .find(|(it, _)| *it == i + 1)
                    .map(|(_, v)| format!("{v:.17e}"))
                    .unwrap_or_default();
                [(i + 1).to_string(), format!("{l:.17e}"), val]
            })
            .collect()
    }
}

struct Validation {
    /// All training sensors over the validation span.
    panel: TimeSeriesPanel,
    /// The same span restricted to the fit sensors.
    observed: TimeSeriesPanel,
    sensors: SensorSet,
    unknown: Vec<usize>,
}

fn validation_mae(model: &SatcnModel, v: &Validation) -> Result<f64> {
    let est = krige(model, &v.observed, &v.sensors, &v.unknown)?;
    let u = model.temporal_reduction();
    let t = v.panel.n_steps();
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &node) in v.unknown.iter().enumerate() {
        for c in 0..t - u {
            if v.panel.obs_mask[[node, c + u]] {
                total += (est[[r, c]] - v.panel.values[[node, c + u]]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(SatcnError::invalid("validation sensors have no observations"));
    }
    Ok(total / count as f64)
}

/// Trains a model on `panel` over `sensors`.
///
/// A seeded share of the sensors is held out for validation; the returned
/// parameters are those with the lowest validation MAE (or the final ones
/// when no validation pass ran).
pub fn train(
    panel: &TimeSeriesPanel,
    sensors: &SensorSet,
    cfg: &TrainConfig,
    arch: &ArchConfig,
) -> Result<(SatcnModel, TrainHistory)> {
    cfg.validate()?;
    arch.validate()?;
    let panel = panel.align_to(sensors);
    let n = sensors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut n_val = (cfg.validation_fraction * n as f64).floor() as usize;
    if n.saturating_sub(n_val) < 3 {
        n_val = 0;
    }
    let mut val_idx = rand::seq::index::sample(&mut rng, n, n_val).into_vec();
    val_idx.sort_unstable();
    let fit_idx: Vec<usize> = (0..n).filter(|i| !val_idx.contains(i)).collect();
    let fit_sensors = sensors.subset(&fit_idx)?;
    let fit_panel = panel.select_sensors(&fit_idx)?;

    let norm = Normalization::fit(&fit_panel)?;
    let full = Arc::new(build_full_adjacency(&fit_sensors, arch.k)?);
    let deg = compute_deg(&full)?;
    let mut model = SatcnModel::init(arch, deg, norm, &mut rng)?;
    model.seed = Some(cfg.seed);

    let u = arch.temporal_reduction();
    let spec = BatchSpec {
        h: arch.h,
        u,
        k: arch.k,
        n_masked: arch.n_masked_for(fit_idx.len()),
        batch_size: cfg.batch_size,
    };

    let validation = if val_idx.is_empty() {
        None
    } else {
        let t = panel.n_steps();
        let span = if cfg.validation_steps == 0 { t } else { cfg.validation_steps.min(t) };
        if span <= u {
            None
        } else {
            let tail = panel.select_steps(t - span..t)?;
            Some(Validation {
                observed: tail.select_sensors(&fit_idx)?,
                panel: tail,
                sensors: sensors.clone(),
                unknown: val_idx.clone(),
            })
        }
    };

    let mut history = TrainHistory {
        validation_sensors: val_idx.iter().map(|&i| sensors.ids()[i].clone()).collect(),
        ..TrainHistory::default()
    };
    if cfg.iterations == 0 {
        return Ok((model, history));
    }

    let mut params = model.param_tensors();
    let mut adam = Adam::new(cfg, &params);
    let mut best: Option<(f64, Vec<ArrayD<f64>>)> = None;
    let mut stale = 0usize;

    for iter in 1..=cfg.iterations {
        let batch = generate_training_batch(&fit_panel, &fit_sensors, &norm, &spec, Some(Arc::clone(&full)), &mut rng)?;
        let masks: Vec<Array2<bool>> = batch
            .samples
            .iter()
            .map(|smp| {
                let mut m = smp.eval_mask.clone();
                if arch.loss_on_masked_only {
                    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
                        if smp.omega.binary_search(&i).is_err() {
                            row.fill(false);
                        }
                    }
                }
                m
            })
            .collect();
        let denom = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum::<usize>();
        if denom == 0 {
            history.train_loss.push(0.0);
            continue;
        }

        let mut grads: Vec<ArrayD<f64>> = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut loss = 0.0;
        for (smp, mask) in batch.samples.iter().zip(&masks) {
            if !mask.iter().any(|&b| b) {
                continue;
            }
            let mut tape = Tape::new();
            let (out, _) = model.forward_tape(&mut tape, &smp.input, &smp.masked_graphs, &smp.full_graph)?;
            let n_rows = smp.target.nrows();
            let h = smp.target.ncols();
            let target = smp.target.clone().into_shape_with_order(IxDyn(&[n_rows, h, 1])).expect("contiguous");
            let mask = mask.clone().into_shape_with_order(IxDyn(&[n_rows, h, 1])).expect("contiguous");
            let l = tape.masked_mae(out, target, mask, denom as f64)?;
            loss += tape.value(l).iter().next().copied().unwrap_or(0.0);
            let g = tape.backward(l)?;
            for (acc, gi) in grads.iter_mut().zip(g.as_slice()) {
                *acc += gi;
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(SatcnError::Numerical(format!(
                "non-finite loss or gradient at iteration {iter} (loss = {loss})"
            )));
        }
        if cfg.cosine_decay {
            let frac = (iter - 1) as f64 / cfg.iterations as f64;
            adam.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        adam.step(&mut params, &grads);
        model.set_params(&params)?;
        history.train_loss.push(loss);

        if let Some(v) = &validation {
            if iter % cfg.validation_every == 0 || iter == cfg.iterations {
                let mae = validation_mae(&model, v)?;
                history.validation.push((iter, mae));
                if best.as_ref().map_or(true, |(b, _)| mae < *b) {
                    best = Some((mae, params.clone()));
                    history.best_iteration = Some(iter);
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, p)) = best {
        model.set_params(&p)?;
    }
    Ok((model, history))
}

/// Estimates the signal at `unknown` nodes of `all_sensors`.
///
/// `observed` is matched to `all_sensors` by id; sensors it does not cover
/// have no observations. Returns `|unknown| x (T - u)` estimates in original
/// units, column `c` belonging to observed time step `c + u`.
pub fn krige(
    m: &SatcnModel,
    observed: &TimeSeriesPanel,
    all_sensors: &SensorSet,
    unknown: &[usize],
) -> Result<Array2<f64>> {
    let u = m.temporal_reduction();
    let t = observed.n_steps();
    if unknown.is_empty() {
        return Ok(Array2::zeros((0, t.saturating_sub(u))));
    }
    if t <= u {
        return Err(SatcnError::invalid(format!("need more than {u} time steps, got {t}")));
    }
    let n = all_sensors.len();
    let mut masked = vec![false; n];
    for &j in unknown {
        if j >= n {
            return Err(SatcnError::invalid(format!("unknown node {j} out of range")));
        }
        let id = &all_sensors.ids()[j];
        if observed.ids.iter().any(|o| o == id) {
            return Err(SatcnError::invalid(format!("sensor {id} is both observed and unknown")));
        }
        masked[j] = true;
    }
    let aligned = observed.align_to(all_sensors);
    let x = m.norm.normalize_panel(&aligned);
    let masked_sched = GraphSchedule::masked_window(all_sensors, m.config.k, &masked, aligned.obs_mask.view())?;
    let full = GraphSchedule::Static(Arc::new(build_full_adjacency(all_sensors, m.config.k)?));
    let z = m.forward_chunked(&x, &masked_sched, &full, 256)?;
    let mut out = Array2::zeros((unknown.len(), t - u));
    for (r, &j) in unknown.iter().enumerate() {
        out.row_mut(r).assign(&z.row(j).mapv(|v| m.norm.invert(v)));
    }
    Ok(out)
}

/// Forward pass with explicit input rows, for invariance checks: every row
/// of `values` is used as given (no zero fill), with `unknown` rows barred
/// from sending. Returns all `n` rows in original units.
pub fn krige_all_rows(
    m: &SatcnModel,
    values: &Array2<f64>,
    observed: ArrayView2<'_, bool>,
    all_sensors: &SensorSet,
    unknown: &[usize],
) -> Result<Array2<f64>> {
    let n = all_sensors.len();
    if values.nrows() != n || observed.dim() != values.dim() {
        return Err(SatcnError::shape("values/mask do not match the sensor set"));
    }
    let mut masked = vec![false; n];
    for &j in unknown {
        *masked.get_mut(j).ok_or_else(|| SatcnError::invalid("unknown node out of range"))? = true;
    }
    let x = values.mapv(|v| m.norm.apply(v));
    let masked_sched = GraphSchedule::masked_window(all_sensors, m.config.k, &masked, observed)?;
    let full = GraphSchedule::Static(Arc::new(build_full_adjacency(all_sensors, m.config.k)?));
    let z = m.forward_chunked(&x, &masked_sched, &full, 256)?;
    Ok(z.mapv(|v| m.norm.invert(v)))
}

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSpec {
    pub arch: ArchConfig,
    pub n: usize,
    pub seed: u64,
    pub step: f64,
    /// Probe at most this many coordinates per tensor.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            arch: ArchConfig {
                h: 4,
                ..ArchConfig::default()
            },
            n: 6,
            seed: 0,
            step: 1e-5,
            max_coords: None,
        }
    }
}

/// Compares tape gradients of the masked MAE with central differences on a
/// random instance: random sensors, inputs, masked set and parameters
/// (biases included).
pub fn gradient_check(spec: &GradCheckSpec) -> Result<crate::autodiff::GradCheckReport> {
    let arch = &spec.arch;
    arch.validate()?;
    if spec.n < 2 {
        return Err(SatcnError::invalid("gradient check needs at least 2 nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords: Vec<[f64; 2]> = (0..spec.n).map(|_| [rng.gen(), rng.gen()]).collect();
    let sensors = crate::graph::build_distance_matrix(&coords, crate::graph::Metric::Euclidean)?;
    let full_graph = build_full_adjacency(&sensors, arch.k)?;
    let deg = compute_deg(&full_graph)?;
    let mut model = SatcnModel::init(arch, deg, Normalization::IDENTITY, &mut rng)?;
    let mut params = model.param_tensors();
    for t in params.iter_mut().filter(|t| t.ndim() == 1) {
        t.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    model.set_params(&params)?;

    let t_in = arch.h + arch.temporal_reduction();
    let n_masked = arch.n_masked_for(spec.n);
    let mut omega = rand::seq::index::sample(&mut rng, spec.n, n_masked).into_vec();
    omega.sort_unstable();
    let mut x = Array2::from_shape_fn((spec.n, t_in), |_| rng.gen_range(-2.0..2.0));
    for &j in &omega {
        x.row_mut(j).fill(0.0);
    }
    let target = Array2::from_shape_fn((spec.n, arch.h), |_| rng.gen_range(-2.0..2.0));
    let mask = Array2::from_elem((spec.n, arch.h), true);
    let masked = GraphSchedule::Static(Arc::new(crate::graph::build_masked_adjacency(&sensors, arch.k, &omega)?));
    let full = GraphSchedule::Static(Arc::new(full_graph));

    let mut tape = Tape::new();
    let (out, _) = model.forward_tape(&mut tape, &x, &masked, &full)?;
    let target3 = target.clone().into_shape_with_order(IxDyn(&[spec.n, arch.h, 1])).expect("contiguous");
    let mask3 = mask.clone().into_shape_with_order(IxDyn(&[spec.n, arch.h, 1])).expect("contiguous");
    let loss = tape.masked_mae(out, target3, mask3, (spec.n * arch.h) as f64)?;
    let analytic = tape.backward(loss)?.into_vec();

    let mut probe = model.clone();
    crate::autodiff::finite_difference_check(
        |p| {
            probe.set_params(p)?;
            let y = probe.forward_normalized(x.view(), &masked, &full)?;
            mae_loss(y.view(), target.view(), mask.view())
        },
        &params,
        &analytic,
        spec.step,
        spec.max_coords,
    )
}
