//! Public numeric kernels: matmul, row softmax, the MLP nonlinearity, and a
//! central-difference gradient checker.
//!
//! Inputs and outputs are `f32` tensors; every kernel upcasts, accumulates
//! in `f64`, and rounds exactly once at the end. Execution is serial with a
//! fixed loop order, so outputs are bit-identical across runs.

use crate::mat::Mat;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// `a · b` for rank-2 tensors with 64-bit accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, ak) = a.dims2()?;
    let (bk, _) = b.dims2()?;
    if ak != bk {
        return Err(CoreError::Shape(format!(
            "matmul inner dimensions differ: {ak} vs {bk}"
        )));
    }
    Ok(Mat::from_tensor(a).matmul(&Mat::from_tensor(b)).to_tensor())
}

/// Row-wise softmax of a rank-2 tensor. Any finite input is valid; rows sum
/// to one within rounding because exponentials and the sum run in `f64`.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    s.dims2()?;
    Ok(Mat::from_tensor(s).softmax_rows().to_tensor())
}

/// Tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_tanh(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    const CUBIC: f64 = 0.044715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

pub(crate) fn gelu_tanh_deriv(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    const CUBIC: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x)
}

/// Two-layer perceptron `gelu(x·w1 + b1)·w2 + b2`; biases are `1×h` and
/// `1×o` rows broadcast over the batch.
pub fn mlp_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let (w1_in, h) = w1.dims2()?;
    let (b1r, b1c) = b1.dims2()?;
    let (w2_in, o) = w2.dims2()?;
    let (b2r, b2c) = b2.dims2()?;
    if w1_in != d || w2_in != h || b1r != 1 || b1c != h || b2r != 1 || b2c != o {
        return Err(CoreError::Shape(format!(
            "mlp_forward shapes do not conform: x[_,{d}] w1[{w1_in},{h}] b1[{b1r},{b1c}] w2[{w2_in},{o}] b2[{b2r},{b2c}]"
        )));
    }
    let xm = Mat::from_tensor(x);
    let mut hid = xm.matmul(&Mat::from_tensor(w1));
    let b1m = Mat::from_tensor(b1);
    for i in 0..hid.rows {
        for j in 0..hid.cols {
            *hid.at_mut(i, j) += b1m.at(0, j);
        }
    }
    let act = hid.map(gelu_tanh);
    let mut out = act.matmul(&Mat::from_tensor(w2));
    let b2m = Mat::from_tensor(b2);
    for i in 0..out.rows {
        for j in 0..out.cols {
            *out.at_mut(i, j) += b2m.at(0, j);
        }
    }
    Ok(out.to_tensor())
}

/// Central-difference gradient of a scalar function of a tensor.
///
/// Each coordinate is perturbed by ±`eps` *after f32 rounding*; the divisor
/// is the actually realized spread `hi - lo` so the estimate is unbiased
/// even when `x ± eps` is not exactly representable.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(CoreError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut grad = vec![0.0f32; x.len()];
    let mut work = x.data().to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        let hi = ((orig as f64) + eps) as f32;
        let lo = ((orig as f64) - eps) as f32;

        work[i] = hi;
        let f_hi = f(&Tensor::new(x.shape().to_vec(), work.clone())?);
        work[i] = lo;
        let f_lo = f(&Tensor::new(x.shape().to_vec(), work.clone())?);
        work[i] = orig;

        let spread = hi as f64 - lo as f64;
        grad[i] = ((f_hi - f_lo) / spread) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}
