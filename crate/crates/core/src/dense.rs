//! Per-point affine maps and activations.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply_inplace(self, y: &mut Array2<f64>) {
        if self == Activation::Relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// `x · wᵀ + b` for `x: rows x c_in`, `w: c_out x c_in`.
pub fn dense_forward(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += &b;
    y
}
