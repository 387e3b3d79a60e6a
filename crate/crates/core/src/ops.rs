//! Differentiable tensor helpers shared by the model components.

use candle_core::{Tensor, D};

use crate::error::Result;

/// Identity in the forward pass, zero derivative in the backward pass.
pub fn stop_gradient(t: &Tensor) -> Tensor {
    t.detach()
}

/// `log(1 + exp(t))` evaluated as `relu(t) + log1p(exp(-|t|))`.
///
/// `log1p` is taken from its series for tiny arguments so that strongly
/// negative inputs keep a positive (non-zero) value.
pub fn softplus(t: &Tensor) -> Result<Tensor> {
    let u = t.abs()?.neg()?.exp()?;
    let u2 = u.sqr()?;
    let series = ((&u - (&u2 * 0.5)?)? + (u2.mul(&u)? * (1.0 / 3.0))?)?;
    let direct = (&u + 1.0)?.log()?;
    let log1p = u.lt(1e-5)?.where_cond(&series, &direct)?;
    Ok((t.relu()? + log1p)?)
}

/// Scalar softplus using the stable branch.
pub fn softplus_f64(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Inverse of [`softplus_f64`] for positive arguments.
pub fn inverse_softplus_f64(y: f64) -> f64 {
    // log(exp(y) - 1) = y + log(1 - exp(-y))
    y + (-(-y).exp()).ln_1p()
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_last(t: &Tensor) -> Result<Tensor> {
    softmax(t, t.rank() - 1)
}

pub fn softmax(t: &Tensor, dim: usize) -> Result<Tensor> {
    let max = t.max_keepdim(dim)?.detach();
    let e = t.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Logistic function; inputs are clamped to ±30 so `exp` stays finite in both passes.
pub fn sigmoid(t: &Tensor) -> Result<Tensor> {
    let t = t.clamp(-30.0, 30.0)?;
    Ok((t.neg()?.exp()? + 1.0)?.recip()?)
}

/// Capsule squash along the last dimension: `v · ‖v‖ / (1 + ‖v‖²)`.
///
/// Zero vectors map to zero with zero gradient.
pub fn squash(t: &Tensor) -> Result<Tensor> {
    let n2 = t.sqr()?.sum_keepdim(D::Minus1)?;
    let nonzero = n2.gt(0.0)?;
    let safe = nonzero.where_cond(&n2, &n2.ones_like()?)?;
    let scale = safe.sqrt()?.div(&(&n2 + 1.0)?)?;
    let scale = nonzero.where_cond(&scale, &n2.zeros_like()?)?;
    Ok(t.broadcast_mul(&scale)?)
}

/// Copies a tensor of any float dtype to a flat `Vec<f64>`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
