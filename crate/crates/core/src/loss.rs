//! Training objectives.
//!
//! * [`LossMode::Cvae`]: `L_KL + α·L_contr + β·L_rec` against the target bank.
//! * [`LossMode::LegacyMargin`]: per-capsule margin KL towards `N(0, 1)` for the
//!   labelled capsule and `N(1, 1)` for the others, plus `β_legacy·L_rec`.
//! * [`LossMode::SoftmaxBaseline`]: cross-entropy on the distance softmax, a
//!   plain reference model for the unknown-detection comparison.
//!
//! Every term is averaged over the batch.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::decoder::reconstruction_loss;
use crate::error::{invalid, Result};
use crate::ops;
use crate::targets::{self, TargetBank};
use crate::variational::{self, CapsuleDistribution};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Cvae,
    LegacyMargin,
    SoftmaxBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mode: LossMode,
    pub total: f64,
    pub kl_term: f64,
    pub contrastive_term: f64,
    pub reconstruction_term: f64,
    /// Cross-entropy of the softmax baseline; zero in the other modes.
    pub cross_entropy_term: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: Option<f64>,
}

/// A differentiable total together with its scalar breakdown.
pub struct LossValue {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub fn total_loss_cvae(
    c: &CapsuleDistribution,
    labels: &[usize],
    bank: &TargetBank,
    x_hat: &Tensor,
    x: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<LossValue> {
    let kl = targets::kl_attraction_loss(c, labels, bank)?;
    let contr = targets::contrastive_loss(c, labels, bank)?;
    let rec = reconstruction_loss(x_hat, x)?;
    let total = ((&kl + (&contr * alpha)?)? + (&rec * beta)?)?;
    let (kl_term, contrastive_term, reconstruction_term) =
        (ops::scalar_f64(&kl)?, ops::scalar_f64(&contr)?, ops::scalar_f64(&rec)?);
    Ok(LossValue {
        breakdown: LossBreakdown {
            mode: LossMode::Cvae,
            total: kl_term + alpha * contrastive_term + beta * reconstruction_term,
            kl_term,
            contrastive_term,
            reconstruction_term,
            cross_entropy_term: 0.0,
            alpha,
            beta,
            lambda: None,
        },
        total,
    })
}

/// `[B, K]` per-capsule KL of each capsule against `N(mean, 1)`.
fn capsule_kl_to_constant(c: &CapsuleDistribution, mean: f64) -> Result<Tensor> {
    let prior_mu = (c.mu.ones_like()? * mean)?;
    let prior_var = c.var.ones_like()?;
    variational::kl_diag_gauss(&c.mu, &c.var, &prior_mu, &prior_var)
}

fn one_hot(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let off = targets::off_class_mask(labels, k, dtype)?;
    Ok((off.ones_like()? - off)?)
}

pub fn total_loss_legacy(
    c: &CapsuleDistribution,
    labels: &[usize],
    beta_legacy: f64,
    lambda: f64,
    x_hat: &Tensor,
    x: &Tensor,
) -> Result<LossValue> {
    let (b, k, _) = c.dims()?;
    if labels.len() != b {
        return Err(invalid!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {bad} out of range for {k} capsules"));
    }
    let present = one_hot(labels, k, c.mu.dtype())?;
    let absent = (present.ones_like()? - &present)?;
    let to_zero = capsule_kl_to_constant(c, 0.0)?;
    let to_one = capsule_kl_to_constant(c, 1.0)?;
    let margin = (present.mul(&to_zero)? + (absent.mul(&to_one)? * lambda)?)?
        .sum(1)?
        .mean(0)?;
    let rec = reconstruction_loss(x_hat, x)?;
    let total = (&margin + (&rec * beta_legacy)?)?;
    let (kl_term, reconstruction_term) = (ops::scalar_f64(&margin)?, ops::scalar_f64(&rec)?);
    Ok(LossValue {
        breakdown: LossBreakdown {
            mode: LossMode::LegacyMargin,
            total: kl_term + beta_legacy * reconstruction_term,
            kl_term,
            contrastive_term: 0.0,
            reconstruction_term,
            cross_entropy_term: 0.0,
            alpha: 0.0,
            beta: beta_legacy,
            lambda: Some(lambda),
        },
        total,
    })
}

/// Denominator guard in [`legacy_closed_set_probs`].
pub const LEGACY_EPS: f64 = 1e-8;

/// `softmax_k(1 / (KL(C_k ‖ N(0, 1)) + ε))` per sample: `[B, K]`.
pub fn legacy_closed_set_probs(c: &CapsuleDistribution) -> Result<Tensor> {
    let kl = capsule_kl_to_constant(c, 0.0)?;
    ops::softmax_last(&(kl + LEGACY_EPS)?.recip()?)
}

/// Cross-entropy of the distance softmax plus `β·L_rec`.
pub fn softmax_baseline_loss(
    distances: &Tensor,
    labels: &[usize],
    gamma: f64,
    beta: f64,
    x_hat: &Tensor,
    x: &Tensor,
) -> Result<LossValue> {
    let (b, k) = distances.dims2()?;
    if labels.len() != b {
        return Err(invalid!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {bad} out of range for {k} classes"));
    }
    let logits = (distances * (-gamma))?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_z = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&log_z)?;
    let picked = log_probs.mul(&one_hot(labels, k, distances.dtype())?)?.sum(1)?;
    let ce = picked.mean(0)?.neg()?;
    let rec = reconstruction_loss(x_hat, x)?;
    let total = (&ce + (&rec * beta)?)?;
    let (ce_term, reconstruction_term) = (ops::scalar_f64(&ce)?, ops::scalar_f64(&rec)?);
    Ok(LossValue {
        breakdown: LossBreakdown {
            mode: LossMode::SoftmaxBaseline,
            total: ce_term + beta * reconstruction_term,
            kl_term: 0.0,
            contrastive_term: 0.0,
            reconstruction_term,
            cross_entropy_term: ce_term,
            alpha: 0.0,
            beta,
            lambda: None,
        },
        total,
    })
}
