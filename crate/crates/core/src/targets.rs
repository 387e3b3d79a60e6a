//! Per-class Gaussian targets and the contrastive repulsion term.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ops;
use crate::params::{ParamGroup, ParamStore};
use crate::variational::{self, CapsuleDistribution, VARIANCE_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// One-hot means and unit variances, never updated.
    Fixed,
    #[default]
    Learnable,
}

#[derive(Clone, Debug)]
enum TargetVariance {
    Constant(Tensor),
    /// Unconstrained parameter mapped through softplus.
    Softplus(Tensor),
}

/// K Gaussian targets over the `[K, d]` capsule layout: `mu`, `var` are `[K, K, d]`.
#[derive(Clone, Debug)]
pub struct TargetBank {
    mode: TargetMode,
    mu: Tensor,
    variance: TargetVariance,
    margins: Vec<f64>,
}

pub const MU_PARAM: &str = "targets.mu";
pub const VAR_PARAM: &str = "targets.var_raw";

fn one_hot_means(k: usize, d: usize) -> Vec<f64> {
    let mut mu = vec![0.0; k * k * d];
    for target in 0..k {
        let start = (target * k + target) * d;
        mu[start..start + d].fill(1.0);
    }
    mu
}

impl TargetBank {
    /// Target `k` has ones on capsule slot `k`, zeros elsewhere, and unit variances.
    ///
    /// Learnable banks register their parameters in `store`; with
    /// `freeze_variance` only the means are trainable.
    pub fn init(
        k: usize,
        d: usize,
        mode: TargetMode,
        margins: Vec<f64>,
        freeze_variance: bool,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if k < 2 {
            return Err(invalid!("need at least two classes, got {k}"));
        }
        if d == 0 {
            return Err(invalid!("target dimension must be positive"));
        }
        if margins.len() != k {
            return Err(invalid!("expected {k} margins, got {}", margins.len()));
        }
        let dtype = store.dtype();
        let dev = Device::Cpu;
        let means = one_hot_means(k, d);
        let (mu, variance) = match mode {
            TargetMode::Fixed => (
                Tensor::from_vec(means, (k, k, d), &dev)?.to_dtype(dtype)?,
                TargetVariance::Constant(Tensor::ones((k, k, d), dtype, &dev)?),
            ),
            TargetMode::Learnable => {
                let mu = store.add(MU_PARAM, ParamGroup::Targets, &[k, k, d], means)?;
                let variance = if freeze_variance {
                    TargetVariance::Constant(Tensor::ones((k, k, d), dtype, &dev)?)
                } else {
                    let raw = ops::inverse_softplus_f64(1.0);
                    TargetVariance::Softplus(store.add(
                        VAR_PARAM,
                        ParamGroup::Targets,
                        &[k, k, d],
                        vec![raw; k * k * d],
                    )?)
                };
                (mu, variance)
            }
        };
        Ok(TargetBank {
            mode,
            mu,
            variance,
            margins,
        })
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.margins.len()
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn var(&self) -> Result<Tensor> {
        match &self.variance {
            TargetVariance::Constant(v) => Ok(v.clone()),
            TargetVariance::Softplus(raw) => Ok(ops::softplus(raw)?.maximum(VARIANCE_FLOOR)?),
        }
    }

    /// Target `k` as a `[K, d]` mean / variance pair.
    pub fn target(&self, k: usize) -> Result<(Tensor, Tensor)> {
        if k >= self.num_classes() {
            return Err(invalid!("target {k} out of range"));
        }
        Ok((self.mu.get(k)?, self.var()?.get(k)?))
    }

    /// `[B, K]` distances from each sample to each target, differentiable in both.
    pub fn distances(&self, c: &CapsuleDistribution) -> Result<Tensor> {
        variational::distance_matrix(c, &self.mu, &self.var()?)
    }

    fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(invalid!("{} labels for a batch of {batch}", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(invalid!("label {bad} out of range for {} classes", self.num_classes()));
        }
        Ok(())
    }
}

/// Batch mean of `d(C, sg[T_y])`.
pub fn kl_attraction_loss(c: &CapsuleDistribution, labels: &[usize], bank: &TargetBank) -> Result<Tensor> {
    let (b, _, _) = c.dims()?;
    bank.check_labels(labels, b)?;
    let idx = label_index(labels)?;
    let t_mu = ops::stop_gradient(bank.mu()).index_select(&idx, 0)?;
    let t_var = ops::stop_gradient(&bank.var()?).index_select(&idx, 0)?;
    Ok(variational::capsule_distance(c, &t_mu, &t_var)?.mean(0)?)
}

/// Batch mean of `(1/(K-1)) Σ_{k≠y} max(m_k - d(sg[C], T_k), 0)`.
pub fn contrastive_loss(c: &CapsuleDistribution, labels: &[usize], bank: &TargetBank) -> Result<Tensor> {
    let k = bank.num_classes();
    if k < 2 {
        return Err(invalid!("contrastive loss needs at least two classes"));
    }
    let (b, _, _) = c.dims()?;
    bank.check_labels(labels, b)?;
    let dist = bank.distances(&c.detach())?;
    let dtype = dist.dtype();
    let margins = Tensor::from_vec(bank.margins().to_vec(), (1, k), dist.device())?.to_dtype(dtype)?;
    let hinge = margins.broadcast_sub(&dist)?.relu()?;
    let off_class = off_class_mask(labels, k, dtype)?;
    let per_sample = (hinge.mul(&off_class)?.sum(1)? / (k - 1) as f64)?;
    Ok(per_sample.mean(0)?)
}

/// `[B, K]` with zeros at each sample's label and ones elsewhere.
pub fn off_class_mask(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let mut mask = vec![1.0f64; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = 0.0;
    }
    Ok(Tensor::from_vec(mask, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn label_index(labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    Ok(Tensor::from_vec(idx, labels.len(), &Device::Cpu)?)
}

/// Smallest `d(T_i, T_j)` over ordered target pairs; collapse shows up as a value near zero.
pub fn min_pairwise_target_distance(bank: &TargetBank) -> Result<f64> {
    let k = bank.num_classes();
    if k < 2 {
        return Err(invalid!("need at least two targets"));
    }
    let mu = bank.mu().detach();
    let var = bank.var()?.detach();
    let as_caps = CapsuleDistribution::new(mu.clone(), var.clone())?;
    let all = ops::to_vec_f64(&variational::distance_matrix(&as_caps, &mu, &var)?)?;
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                best = best.min(all[i * k + j]);
            }
        }
    }
    Ok(best)
}
