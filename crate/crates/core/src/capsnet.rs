//! Capsule layer: squash, pose transformation and routing-by-agreement.
//!
//! Shapes use a leading batch axis `B`:
//! primary capsules `[B, n, f1]`, pose weights `[n, K, f2, f1]`,
//! predictions `[B, n, K, f2]`, class capsules `[B, K, f2]`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ops;

/// Squash a single capsule vector: output parallel to `v` with norm `‖v‖²/(1+‖v‖²)`.
pub fn squash(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("squash input must be finite"));
    }
    let n2: f64 = v.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let scale = n2.sqrt() / (1.0 + n2);
    Ok(v.iter().map(|x| x * scale).collect())
}

#[derive(Clone, Debug)]
pub struct PrimaryCapsules {
    /// `[B, n_primary, f1]`
    pub capsules: Tensor,
    /// `(capsule maps, height, width)` of the convolutional grid the capsules were cut from.
    pub grid: (usize, usize, usize),
}

impl PrimaryCapsules {
    /// Reshapes a `[B, maps * f1, h, w]` feature map into squashed capsules.
    pub fn from_feature_map(features: &Tensor, f1: usize) -> Result<Self> {
        let (b, c, h, w) = features.dims4()?;
        if f1 == 0 || c % f1 != 0 {
            return Err(invalid!("{c} channels do not split into capsules of size {f1}"));
        }
        let maps = c / f1;
        // [B, maps, f1, h, w] -> [B, maps, h, w, f1] -> [B, n, f1]
        let caps = features
            .reshape((b, maps, f1, h, w))?
            .permute((0, 1, 3, 4, 2))?
            .reshape((b, maps * h * w, f1))?;
        Ok(PrimaryCapsules {
            capsules: ops::squash(&caps)?,
            grid: (maps, h, w),
        })
    }

    pub fn n_primary(&self) -> Result<usize> {
        Ok(self.capsules.dim(1)?)
    }
}

#[derive(Clone, Debug)]
pub struct PoseWeights {
    /// `[n_primary, K, f2, f1]`
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct ClassCapsules {
    /// `[B, K, f2]`
    pub capsules: Tensor,
}

/// `û[b, i, j] = W[i, j] · u[b, i]`.
pub fn pose_transform(u: &PrimaryCapsules, w: &PoseWeights) -> Result<Tensor> {
    let (b, n, f1) = u.capsules.dims3()?;
    let (wn, k, f2, wf1) = w.weights.dims4()?;
    if n != wn || f1 != wf1 {
        return Err(invalid!(
            "pose weights [{wn}, {k}, {f2}, {wf1}] do not match primary capsules [{n}, {f1}]"
        ));
    }
    let lhs = w.weights.reshape((n, k * f2, f1))?;
    let rhs = u.capsules.reshape((b, n, f1, 1))?;
    let out = lhs.broadcast_matmul(&rhs)?;
    Ok(out.reshape((b, n, k, f2))?)
}

/// Axis over which routing logits are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingNormalization {
    /// Each input capsule distributes its coupling over the K class capsules.
    #[default]
    OverOutputs,
    /// Each class capsule distributes its coupling over the input capsules.
    OverInputs,
}

#[derive(Clone, Debug)]
pub enum RoutingMode {
    Standard,
    /// Coefficients become `relu(c + gate_bias)` after normalization; `gate_bias` is a scalar tensor.
    Gated { gate_bias: Tensor },
}

#[derive(Clone, Debug)]
pub struct RoutingState {
    /// `[B, n, K]` logits used for the final coefficients.
    pub logits: Tensor,
    /// `[B, n, K]` coefficients of the final iteration.
    pub coefficients: Tensor,
    pub iterations: usize,
    pub gated: bool,
    /// Coefficients of every iteration, detached.
    pub coefficient_trace: Vec<Tensor>,
}

fn coupling(
    logits: &Tensor,
    mode: &RoutingMode,
    normalization: RoutingNormalization,
) -> Result<Tensor> {
    let c = match normalization {
        RoutingNormalization::OverOutputs => ops::softmax(logits, 2)?,
        RoutingNormalization::OverInputs => ops::softmax(logits, 1)?,
    };
    Ok(match mode {
        RoutingMode::Standard => c,
        RoutingMode::Gated { gate_bias } => c
            .broadcast_add(&gate_bias.reshape((1, 1, 1))?)?
            .relu()?,
    })
}

/// Routing-by-agreement from predictions `[B, n, K, f2]` to class capsules.
///
/// Only the final weighted sum and squash are differentiated: logits are
/// accumulated on detached predictions, so the coefficients act as constants
/// (the gate bias of the final iteration still receives a gradient).
pub fn dynamic_routing(
    predictions: &Tensor,
    iterations: usize,
    mode: &RoutingMode,
    normalization: RoutingNormalization,
) -> Result<(ClassCapsules, RoutingState)> {
    if iterations == 0 {
        return Err(invalid!("routing needs at least one iteration"));
    }
    let (b, n, k, _f2) = predictions.dims4()?;
    let detached = predictions.detach();
    let mut logits = Tensor::zeros((b, n, k), predictions.dtype(), predictions.device())?;
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let last = it + 1 == iterations;
        let c = coupling(&logits, mode, normalization)?;
        trace.push(c.detach());
        let (c, u) = if last {
            (c, predictions)
        } else {
            (c.detach(), &detached)
        };
        let s = c.unsqueeze(3)?.broadcast_mul(u)?.sum(1)?;
        let v = ops::squash(&s)?;
        if last {
            let state = RoutingState {
                logits,
                coefficients: trace.last().expect("pushed above").clone(),
                iterations,
                gated: matches!(mode, RoutingMode::Gated { .. }),
                coefficient_trace: trace,
            };
            return Ok((ClassCapsules { capsules: v }, state));
        }
        let agreement = detached
            .broadcast_mul(&v.detach().unsqueeze(1)?)?
            .sum(D::Minus1)?;
        logits = (logits + agreement)?;
    }
    unreachable!("loop returns on its last iteration")
}
