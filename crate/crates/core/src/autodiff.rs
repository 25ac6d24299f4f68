//! Reverse-mode differentiation over the operators the network uses.
//!
//! A [`Tape`] records tensor operations in creation order, so every input of
//! a node precedes it. [`Tape::backward`] walks the records in reverse and
//! accumulates adjoints; parameters registered with [`Tape::param`] receive
//! their gradients in registration order.
//!
//! Non-differentiable points use subgradient 0 (`|x|` and `relu` at 0).

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::aggregation::{stack_features, stack_features_backward, StackMask, STACK_WIDTH};
use crate::error::{Result, SatcnError};
use crate::graph::GraphSchedule;
use crate::tcn::{tcn_backward, tcn_forward, TcnLayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op<'g> {
    Leaf,
    Stack {
        x: NodeId,
        sched: &'g GraphSchedule,
        deg: f64,
        eps: f64,
        mask: StackMask,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    MaskedMae {
        pred: NodeId,
        target: ArrayD<f64>,
        mask: ArrayD<bool>,
        denom: f64,
    },
}

struct Node<'g> {
    value: ArrayD<f64>,
    op: Op<'g>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
    params: Vec<NodeId>,
}

/// Parameter adjoints in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    ids: Vec<NodeId>,
    grads: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.ids.iter().position(|&p| p == id).map(|i| &self.grads[i])
    }

    pub fn into_vec(self) -> Vec<ArrayD<f64>> {
        self.grads
    }

    pub fn as_slice(&self) -> &[ArrayD<f64>] {
        &self.grads
    }
}

fn to2d(a: &ArrayD<f64>) -> Array2<f64> {
    let last = *a.shape().last().unwrap_or(&1);
    let rows = a.len() / last.max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, last))
        .expect("contiguous")
}

impl<'g> Default for Tape<'g> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op<'g>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<'g>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| SatcnError::invalid(format!("unknown tape node {}", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push(id);
        id
    }

    /// A leaf that receives no adjoint.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Aggregator/scaler stack: `n x T x c` to `n x T x 21c`.
    pub fn stack(&mut self, x: NodeId, sched: &'g GraphSchedule, deg: f64, eps: f64, mask: StackMask) -> Result<NodeId> {
        let xv = self.node(x)?.value.view().into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| SatcnError::shape("stack input must be 3-D"))?;
        let out = stack_features(xv, sched, deg, eps, &mask)?.into_dyn();
        let flag = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Stack { x, sched, deg, eps, mask }, flag))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `c_out x c_in`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let wv = self.node(w)?.value.view().into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| SatcnError::shape("dense weight must be 2-D"))?;
        let bv = self.node(b)?.value.view().into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| SatcnError::shape("dense bias must be 1-D"))?;
        let c_in = *xv.shape().last().unwrap_or(&0);
        if wv.ncols() != c_in || bv.len() != wv.nrows() {
            return Err(SatcnError::shape(format!(
                "dense: input width {c_in}, weight {:?}, bias {}",
                wv.dim(),
                bv.len()
            )));
        }
        let mut y = to2d(xv).dot(&wv.t());
        y += &bv;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = wv.nrows();
        let y = y.into_shape_with_order(IxDyn(&shape)).expect("contiguous");
        let flag = self.grad_flag(&[x, w, b]);
        Ok(self.push(y, Op::Dense { x, w, b }, flag))
    }

    /// Unpadded temporal convolution, kernel `w x c_in x c_out`.
    pub fn conv(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.node(x)?.value.view().into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| SatcnError::shape("conv input must be 3-D"))?;
        let p = TcnLayerParams {
            kernel: self.node(kernel)?.value.clone().into_dimensionality()
                .map_err(|_| SatcnError::shape("conv kernel must be 3-D"))?,
            bias: self.node(bias)?.value.clone().into_dimensionality()
                .map_err(|_| SatcnError::shape("conv bias must be 1-D"))?,
        };
        let y = tcn_forward(xv, &p)?.into_dyn();
        let flag = self.grad_flag(&[x, kernel, bias]);
        Ok(self.push(y, Op::Conv { x, kernel, bias }, flag))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.node(x)?.value.mapv(|v| v.max(0.0));
        let flag = self.grad_flag(&[x]);
        Ok(self.push(y, Op::Relu(x), flag))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.node(x)?.value.mapv(f64::sqrt);
        let flag = self.grad_flag(&[x]);
        Ok(self.push(y, Op::Sqrt(x), flag))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.node(x)?.value.mapv(f64::abs);
        let flag = self.grad_flag(&[x]);
        Ok(self.push(y, Op::Abs(x), flag))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.node(x)?.value.mapv(|v| v * v);
        let flag = self.grad_flag(&[x]);
        Ok(self.push(y, Op::Square(x), flag))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(SatcnError::shape("add: operand shapes differ"));
        }
        let y = av + bv;
        let flag = self.grad_flag(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), flag))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(SatcnError::shape("mul: operand shapes differ"));
        }
        let y = av * bv;
        let flag = self.grad_flag(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), flag))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.sum();
        let flag = self.grad_flag(&[x]);
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(x), flag))
    }

    /// `Σ_mask |pred - target| / denom` as a scalar node.
    pub fn masked_mae(&mut self, pred: NodeId, target: ArrayD<f64>, mask: ArrayD<bool>, denom: f64) -> Result<NodeId> {
        let pv = &self.node(pred)?.value;
        if pv.shape() != target.shape() || pv.shape() != mask.shape() {
            return Err(SatcnError::shape(format!(
                "loss shapes differ: pred {:?}, target {:?}, mask {:?}",
                pv.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        if !(denom > 0.0) {
            return Err(SatcnError::invalid("loss normalizer must be positive"));
        }
        let total: f64 = pv
            .iter()
            .zip(target.iter())
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t).abs())
            .sum();
        let flag = self.grad_flag(&[pred]);
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), total / denom),
            Op::MaskedMae { pred, target, mask, denom },
            flag,
        ))
    }

    /// Adjoints of every registered parameter with respect to `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(SatcnError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut adj: Vec<Option<ArrayD<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(ArrayD::from_elem(loss_node.value.raw_dim(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let inputs: Vec<NodeId> = match &node.op {
                Op::Leaf => vec![],
                Op::Stack { x, .. } | Op::Relu(x) | Op::Sqrt(x) | Op::Abs(x) | Op::Square(x) | Op::Sum(x) => vec![*x],
                Op::Dense { x, w, b } => vec![*x, *w, *b],
                Op::Conv { x, kernel, bias } => vec![*x, *kernel, *bias],
                Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
                Op::MaskedMae { pred, .. } => vec![*pred],
            };
            if let Some(bad) = inputs.iter().find(|i| i.0 >= idx) {
                return Err(SatcnError::invalid(format!(
                    "cycle detected: node {idx} depends on node {}",
                    bad.0
                )));
            }
            let contributions = self.local_adjoints(node, &g)?;
            for (input, grad) in inputs.into_iter().zip(contributions) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => *acc += &grad,
                    slot @ None => *slot = Some(grad),
                }
            }
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        let grads = self
            .params
            .iter()
            .map(|&p| {
                adj.get(p.0)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| ArrayD::zeros(self.nodes[p.0].value.raw_dim()))
            })
            .collect();
        Ok(Gradients {
            ids: self.params.clone(),
            grads,
        })
    }

    // Adjoint contribution to each input of `node`, in input order.
    fn local_adjoints(&self, node: &Node<'g>, g: &ArrayD<f64>) -> Result<Vec<Option<ArrayD<f64>>>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Stack { x, sched, deg, eps, mask } => {
                let xv = val(*x).view().into_dimensionality::<ndarray::Ix3>().expect("3-D");
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().expect("3-D");
                debug_assert_eq!(gv.dim().2, xv.dim().2 * STACK_WIDTH);
                vec![Some(stack_features_backward(xv, sched, *deg, *eps, mask, gv)?.into_dyn())]
            }
            Op::Dense { x, w, b } => {
                let g2 = to2d(g);
                let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
                let dx = wants(*x).then(|| {
                    g2.dot(&wv)
                        .into_shape_with_order(val(*x).raw_dim())
                        .expect("contiguous")
                });
                let dw = wants(*w).then(|| g2.t().dot(&to2d(val(*x))).into_dyn());
                let db = wants(*b).then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![dx, dw, db]
            }
            Op::Conv { x, kernel, .. } => {
                let xv = val(*x).view().into_dimensionality::<ndarray::Ix3>().expect("3-D");
                let kv = val(*kernel).clone().into_dimensionality::<ndarray::Ix3>().expect("3-D");
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().expect("3-D");
                let (dx, dk, db) = tcn_backward(xv, &kv, gv);
                vec![Some(dx.into_dyn()), Some(dk.into_dyn()), Some(db.into_dyn())]
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(d)]
            }
            Op::Sqrt(_) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 });
                vec![Some(d)]
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |d, &v| *d *= sign(v));
                vec![Some(d)]
            }
            Op::Square(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |d, &v| *d *= 2.0 * v);
                vec![Some(d)]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul(a, b) => vec![Some(g * val(*b)), Some(g * val(*a))],
            Op::Sum(x) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(val(*x).raw_dim(), s))]
            }
            Op::MaskedMae { pred, target, mask, denom } => {
                let s = g.iter().next().copied().unwrap_or(0.0) / denom;
                let mut d = ArrayD::zeros(val(*pred).raw_dim());
                for (((d, &p), &t), &m) in d.iter_mut().zip(val(*pred).iter()).zip(target.iter()).zip(mask.iter()) {
                    if m {
                        *d = s * sign(p - t);
                    }
                }
                vec![Some(d)]
            }
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
}

/// Compares `analytic` gradients with central differences
/// `(f(p + δ) - f(p - δ)) / 2δ`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(1, |a|, |n|)`.
/// With `max_coords` set, at most that many evenly spaced coordinates of each
/// tensor are probed.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[ArrayD<f64>]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(SatcnError::invalid("finite-difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(SatcnError::shape("parameter and gradient lists differ in length"));
    }
    let mut work: Vec<ArrayD<f64>> = params.iter().map(|p| p.as_standard_layout().into_owned()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        per_tensor: vec![0.0; params.len()],
    };
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[ti].shape() {
            return Err(SatcnError::shape(format!("gradient {ti} shape differs from its parameter")));
        }
        let grad = grad.as_standard_layout();
        let len = work[ti].len();
        let stride = match max_coords {
            Some(m) if m > 0 && m < len => len.div_ceil(m),
            _ => 1,
        };
        for idx in (0..len).step_by(stride) {
            let orig = work[ti].as_slice().expect("contiguous")[idx];
            work[ti].as_slice_mut().expect("contiguous")[idx] = orig + step;
            let plus = f(&work)?;
            work[ti].as_slice_mut().expect("contiguous")[idx] = orig - step;
            let minus = f(&work)?;
            work[ti].as_slice_mut().expect("contiguous")[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(SatcnError::Numerical(format!(
                    "non-finite objective while probing tensor {ti}, coordinate {idx}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_slice().expect("contiguous")[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates_checked += 1;
            if rel > report.per_tensor[ti] {
                report.per_tensor[ti] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}
