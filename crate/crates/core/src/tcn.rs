//! Unpadded temporal convolution shared across nodes.

use ndarray::{s, Array1, Array2, Array3, ArrayView3};

use crate::error::{Result, SatcnError};

/// Kernel `w x c_in x c_out` and bias `c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnLayerParams {
    pub kernel: Array3<f64>,
    pub bias: Array1<f64>,
}

impl TcnLayerParams {
    pub fn width(&self) -> usize {
        self.kernel.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dim().2
    }

    fn check(&self, x: &ArrayView3<'_, f64>) -> Result<usize> {
        let (_, t_in, c) = x.dim();
        let w = self.width();
        if w == 0 {
            return Err(SatcnError::invalid("kernel width must be at least 1"));
        }
        if self.bias.len() != self.c_out() {
            return Err(SatcnError::shape("bias length does not match kernel outputs"));
        }
        if c != self.c_in() {
            return Err(SatcnError::shape(format!("input has {c} channels, kernel expects {}", self.c_in())));
        }
        if t_in < w {
            return Err(SatcnError::invalid(format!("input length {t_in} shorter than kernel width {w}")));
        }
        Ok(t_in - w + 1)
    }
}

// Rows (node, t) holding the w * c_in inputs that feed output t.
fn im2col(x: &ArrayView3<'_, f64>, w: usize, t_out: usize) -> Array2<f64> {
    let (n, _, c) = x.dim();
    let mut cols = Array2::zeros((n * t_out, w * c));
    for i in 0..n {
        for t in 0..t_out {
            let window = x.slice(s![i, t..t + w, ..]);
            let mut row = cols.row_mut(i * t_out + t);
            for (dst, src) in row.iter_mut().zip(window.iter()) {
                *dst = *src;
            }
        }
    }
    cols
}

fn kernel_matrix(kernel: &Array3<f64>) -> Array2<f64> {
    let (w, ci, co) = kernel.dim();
    kernel
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((w * ci, co))
        .expect("contiguous kernel")
}

/// `out[i, t, o] = bias[o] + Σ_τ Σ_a kernel[τ, a, o] · x[i, t + τ, a]`.
pub fn tcn_forward(x: ArrayView3<'_, f64>, p: &TcnLayerParams) -> Result<Array3<f64>> {
    let t_out = p.check(&x)?;
    let n = x.dim().0;
    let cols = im2col(&x, p.width(), t_out);
    let mut y = cols.dot(&kernel_matrix(&p.kernel));
    y += &p.bias;
    Ok(y.into_shape_with_order((n, t_out, p.c_out())).expect("contiguous output"))
}

/// Gradients of [`tcn_forward`]: `(d_x, d_kernel, d_bias)`.
pub fn tcn_backward(
    x: ArrayView3<'_, f64>,
    kernel: &Array3<f64>,
    grad_out: ArrayView3<'_, f64>,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (n, t_in, c) = x.dim();
    let (w, _, co) = kernel.dim();
    let t_out = t_in - w + 1;
    let g = grad_out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * t_out, co))
        .expect("contiguous gradient");
    let cols = im2col(&x, w, t_out);
    let d_kernel = cols
        .t()
        .dot(&g)
        .into_shape_with_order((w, c, co))
        .expect("kernel shape");
    let d_bias = g.sum_axis(ndarray::Axis(0));
    let d_cols = g.dot(&kernel_matrix(kernel).t());
    let mut d_x = Array3::zeros((n, t_in, c));
    for i in 0..n {
        for t in 0..t_out {
            let row = d_cols.row(i * t_out + t);
            let mut window = d_x.slice_mut(s![i, t..t + w, ..]);
            for (dst, src) in window.iter_mut().zip(row.iter()) {
                *dst += *src;
            }
        }
    }
    (d_x, d_kernel, d_bias)
}

/// Convenience for bias-free tests and tools.
pub fn zero_bias(c_out: usize) -> Array1<f64> {
    Array1::zeros(c_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn difference_kernel() {
        let p = TcnLayerParams {
            kernel: Array3::from_shape_vec((2, 1, 1), vec![1.0, -1.0]).unwrap(),
            bias: zero_bias(1),
        };
        let y = tcn_forward(seq(&[3.0, 5.0, 9.0]).view(), &p).unwrap();
        assert_eq!(y.into_raw_vec_and_offset().0, vec![-2.0, -4.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut kernel = Array3::zeros((1, 2, 2));
        kernel[[0, 0, 0]] = 1.0;
        kernel[[0, 1, 1]] = 1.0;
        let p = TcnLayerParams { kernel, bias: zero_bias(2) };
        let x = Array3::from_shape_fn((3, 4, 2), |(i, t, c)| (i * 100 + t * 10 + c) as f64);
        assert_eq!(tcn_forward(x.view(), &p).unwrap(), x);
    }

    #[test]
    fn lengths_shrink_by_width_minus_one() {
        let p = TcnLayerParams {
            kernel: Array3::from_elem((2, 1, 1), 0.5),
            bias: array![0.1],
        };
        let x = Array3::zeros((2, 8, 1));
        let y1 = tcn_forward(x.view(), &p).unwrap();
        let y2 = tcn_forward(y1.view(), &p).unwrap();
        assert_eq!(y1.dim().1, 7);
        assert_eq!(y2.dim().1, 6);
        assert!(tcn_forward(Array3::zeros((1, 1, 1)).view(), &p).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Array3::from_shape_fn((2, 5, 2), |(i, t, c)| ((i * 7 + t * 3 + c) as f64 * 0.37).sin());
        let kernel = Array3::from_shape_fn((3, 2, 2), |(a, b, c)| ((a + 2 * b + 3 * c) as f64 * 0.61).cos());
        let up = Array3::from_shape_fn((2, 3, 2), |(i, t, c)| ((i + t + c) as f64 * 0.9).sin());
        let loss = |x: &Array3<f64>, k: &Array3<f64>| {
            let p = TcnLayerParams { kernel: k.clone(), bias: array![0.2, -0.1] };
            (&tcn_forward(x.view(), &p).unwrap() * &up).sum()
        };
        let (dx, dk, db) = tcn_backward(x.view(), &kernel, up.view());
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&a, &kernel) - loss(&b, &kernel)) / (2.0 * h);
            assert!((num - dx.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for idx in 0..kernel.len() {
            let mut a = kernel.clone();
            let mut b = kernel.clone();
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&x, &a) - loss(&x, &b)) / (2.0 * h);
            assert!((num - dk.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        let want = up.sum_axis(ndarray::Axis(0)).sum_axis(ndarray::Axis(0));
        for (a, b) in db.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn receptive_field_is_local(t_prime in 0usize..9, w in 1usize..4, bump in -5.0..5.0f64) {
            let p = TcnLayerParams {
                kernel: Array3::from_shape_fn((w, 1, 2), |(a, _, c)| 1.0 + a as f64 + c as f64),
                bias: array![0.3, 0.0],
            };
            let x = Array3::from_shape_fn((2, 9, 1), |(i, t, _)| (i + t) as f64);
            let mut y = x.clone();
            y[[1, t_prime, 0]] += bump;
            let a = tcn_forward(x.view(), &p).unwrap();
            let b = tcn_forward(y.view(), &p).unwrap();
            for t in 0..a.dim().1 {
                if !(t <= t_prime && t_prime < t + w) {
                    prop_assert_eq!(a.slice(s![.., t, ..]), b.slice(s![.., t, ..]));
                }
            }
        }

        #[test]
        fn linear_without_bias(alpha in -3.0..3.0f64, beta in -3.0..3.0f64, len in 3usize..10) {
            let p = TcnLayerParams {
                kernel: Array3::from_shape_fn((3, 2, 2), |(a, b, c)| (a as f64 - b as f64) * 0.5 + c as f64),
                bias: zero_bias(2),
            };
            let x = Array3::from_shape_fn((2, len, 2), |(i, t, c)| ((i + 2 * t + c) as f64).sin());
            let y = Array3::from_shape_fn((2, len, 2), |(i, t, c)| ((3 * i + t + c) as f64).cos());
            let combo = &x * alpha + &y * beta;
            let lhs = tcn_forward(combo.view(), &p).unwrap();
            let rhs = tcn_forward(x.view(), &p).unwrap() * alpha + tcn_forward(y.view(), &p).unwrap() * beta;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
