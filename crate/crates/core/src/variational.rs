//! Probabilistic capsules: diagonal Gaussians per class capsule, sampling,
//! KL divergences and the distance-based class posterior.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::capsnet::ClassCapsules;
use crate::error::{invalid, Result};
use crate::ops;

/// Lower bound applied to every variance produced by a softplus.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Capsule-wise affine maps `f2 -> d`, shared over the K capsule slots.
#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[f2, d]`
    pub mu_weight: Tensor,
    /// `[d]`
    pub mu_bias: Tensor,
    pub var_weight: Tensor,
    pub var_bias: Tensor,
}

/// K diagonal Gaussians per sample: `mu`, `var` are `[B, K, d]`.
#[derive(Clone, Debug)]
pub struct CapsuleDistribution {
    pub mu: Tensor,
    pub var: Tensor,
}

impl CapsuleDistribution {
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.dims() != var.dims() || mu.rank() != 3 {
            return Err(invalid!(
                "mean {:?} and variance {:?} must share a [B, K, d] shape",
                mu.dims(),
                var.dims()
            ));
        }
        Ok(CapsuleDistribution { mu, var })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.mu.dims3()?)
    }

    pub fn detach(&self) -> CapsuleDistribution {
        CapsuleDistribution {
            mu: self.mu.detach(),
            var: self.var.detach(),
        }
    }

    /// Sample `i` of the batch as a batch of one.
    pub fn sample(&self, i: usize) -> Result<CapsuleDistribution> {
        Ok(CapsuleDistribution {
            mu: self.mu.narrow(0, i, 1)?,
            var: self.var.narrow(0, i, 1)?,
        })
    }
}

fn affine(v: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(v.broadcast_matmul(weight)?.broadcast_add(bias)?)
}

pub fn probabilistic_head(v: &ClassCapsules, head: &HeadParams) -> Result<CapsuleDistribution> {
    let (_, _, f2) = v.capsules.dims3()?;
    let (wf2, d) = head.mu_weight.dims2()?;
    if wf2 != f2 || head.var_weight.dims2()? != (f2, d) {
        return Err(invalid!(
            "head expects capsules of size {wf2}, got {f2}"
        ));
    }
    let mu = affine(&v.capsules, &head.mu_weight, &head.mu_bias)?;
    let pre = affine(&v.capsules, &head.var_weight, &head.var_bias)?;
    let var = ops::softplus(&pre)?.maximum(VARIANCE_FLOOR)?;
    CapsuleDistribution::new(mu, var)
}

#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Tensor,
    pub noise: Tensor,
}

/// `z = mu + sqrt(var) ⊙ ε` with ε drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(
    dist: &CapsuleDistribution,
    rng: &mut R,
) -> Result<LatentSample> {
    let n = dist.mu.elem_count();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::from_vec(eps, dist.mu.shape(), dist.mu.device())?.to_dtype(dist.mu.dtype())?;
    reparameterize_with_noise(dist, &noise)
}

pub fn reparameterize_with_noise(dist: &CapsuleDistribution, noise: &Tensor) -> Result<LatentSample> {
    let noise = noise.detach();
    let z = (&dist.mu + dist.var.sqrt()?.mul(&noise)?)?;
    Ok(LatentSample { z, noise })
}

fn ensure_positive(t: &Tensor, what: &str) -> Result<()> {
    let min = ops::scalar_f64(&t.flatten_all()?.min(0)?)?;
    if !(min > 0.0) {
        return Err(invalid!("{what} must be strictly positive (min {min})"));
    }
    Ok(())
}

/// `KL(N(mu1, var1) ‖ N(mu2, var2))` for diagonal Gaussians, summed over the last axis.
///
/// Arguments broadcast against each other.
pub fn kl_diag_gauss(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<Tensor> {
    ensure_positive(var1, "var1")?;
    ensure_positive(var2, "var2")?;
    kl_unchecked(mu1, var1, mu2, var2)
}

fn kl_unchecked(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<Tensor> {
    let log_ratio = (var2.log()?.broadcast_sub(&var1.log()?)? * 0.5)?;
    let diff2 = mu1.broadcast_sub(mu2)?.sqr()?;
    let quad = var1.broadcast_add(&diff2)?.broadcast_div(&(var2 * 2.0)?)?;
    let per_dim = ((log_ratio + quad)? - 0.5)?;
    Ok(per_dim.sum(D::Minus1)?)
}

/// Scalar reference of [`kl_diag_gauss`].
pub fn kl_diag_gauss_f64(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(invalid!("KL arguments must share a length"));
    }
    if var1.iter().chain(var2).any(|v| !(*v > 0.0)) {
        return Err(invalid!("variances must be strictly positive"));
    }
    Ok((0..d)
        .map(|i| {
            0.5 * (var2[i] / var1[i]).ln() + (var1[i] + (mu1[i] - mu2[i]).powi(2)) / (2.0 * var2[i])
                - 0.5
        })
        .sum())
}

/// `d(C, T) = (1/K) Σ_k KL(C_k ‖ T_k)` per sample; `target_mu`, `target_var` are `[K, d]` or `[B, K, d]`.
pub fn capsule_distance(c: &CapsuleDistribution, target_mu: &Tensor, target_var: &Tensor) -> Result<Tensor> {
    ensure_positive(&c.var, "capsule variance")?;
    ensure_positive(target_var, "target variance")?;
    let (_, k, d) = c.dims()?;
    let t_dims = target_mu.dims();
    if t_dims.len() < 2 || t_dims[t_dims.len() - 2..] != [k, d] {
        return Err(invalid!("target shape {:?} does not match capsules [{k}, {d}]", t_dims));
    }
    Ok(kl_unchecked(&c.mu, &c.var, target_mu, target_var)?.mean(D::Minus1)?)
}

/// Distances from every sample to every target: `[B, K_targets]`.
///
/// `targets_mu`, `targets_var` are `[K_targets, K, d]`.
pub fn distance_matrix(c: &CapsuleDistribution, targets_mu: &Tensor, targets_var: &Tensor) -> Result<Tensor> {
    let (_, k, d) = c.dims()?;
    let (_, tk, td) = targets_mu.dims3()?;
    if tk != k || td != d {
        return Err(invalid!("targets [_, {tk}, {td}] do not match capsules [{k}, {d}]"));
    }
    let mu1 = c.mu.unsqueeze(1)?;
    let var1 = c.var.unsqueeze(1)?;
    let mu2 = targets_mu.unsqueeze(0)?;
    let var2 = targets_var.unsqueeze(0)?;
    Ok(kl_unchecked(&mu1, &var1, &mu2, &var2)?.mean(D::Minus1)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosterior {
    pub probs: Vec<f64>,
    pub gamma: f64,
    pub distances: Vec<f64>,
}

impl ClassPosterior {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x < xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `-gamma · distances`.
pub fn class_posterior(distances: &[f64], gamma: f64) -> Result<ClassPosterior> {
    if distances.is_empty() {
        return Err(invalid!("class posterior needs at least one distance"));
    }
    if !(gamma > 0.0) {
        return Err(invalid!("gamma must be positive, got {gamma}"));
    }
    let logits: Vec<f64> = distances.iter().map(|d| -gamma * d).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ClassPosterior {
        probs: exps.iter().map(|e| e / total).collect(),
        gamma,
        distances: distances.to_vec(),
    })
}

/// Batched [`class_posterior`] on a `[B, K]` distance tensor.
pub fn class_posterior_tensor(distances: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(invalid!("gamma must be positive, got {gamma}"));
    }
    ops::softmax_last(&(distances * (-gamma))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn identity_head(f2: usize) -> HeadParams {
        let dev = Device::Cpu;
        HeadParams {
            mu_weight: Tensor::eye(f2, DType::F64, &dev).unwrap(),
            mu_bias: Tensor::zeros(f2, DType::F64, &dev).unwrap(),
            var_weight: Tensor::zeros((f2, f2), DType::F64, &dev).unwrap(),
            var_bias: Tensor::zeros(f2, DType::F64, &dev).unwrap(),
        }
    }

    #[test]
    fn head_identity_and_ln2_variance() {
        let v = ClassCapsules {
            capsules: t(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6], &[1, 2, 3]),
        };
        let dist = probabilistic_head(&v, &identity_head(3)).unwrap();
        assert_eq!(
            ops::to_vec_f64(&dist.mu).unwrap(),
            ops::to_vec_f64(&v.capsules).unwrap()
        );
        for x in ops::to_vec_f64(&dist.var).unwrap() {
            assert!((x - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn head_large_negative_preactivation_stays_positive() {
        let mut head = identity_head(2);
        head.var_bias = t(&[-40.0, -40.0], &[2]);
        let v = ClassCapsules {
            capsules: Tensor::zeros((1, 1, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let dist = probabilistic_head(&v, &head).unwrap();
        for x in ops::to_vec_f64(&dist.var).unwrap() {
            assert!(x > 0.0 && x.is_finite());
            assert!(x >= VARIANCE_FLOOR);
        }
    }

    #[test]
    fn reparameterize_limits() {
        let mu = t(&[0.5, -1.0, 2.0, 0.0], &[1, 2, 2]);
        let dist = CapsuleDistribution::new(mu.clone(), mu.ones_like().unwrap()).unwrap();
        let s = reparameterize_with_noise(&dist, &mu.zeros_like().unwrap()).unwrap();
        assert_eq!(ops::to_vec_f64(&s.z).unwrap(), ops::to_vec_f64(&mu).unwrap());
        let s = reparameterize_with_noise(&dist, &mu.ones_like().unwrap()).unwrap();
        let shifted: Vec<f64> = ops::to_vec_f64(&mu).unwrap().iter().map(|x| x + 1.0).collect();
        assert_eq!(ops::to_vec_f64(&s.z).unwrap(), shifted);

        let a = reparameterize(&dist, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = reparameterize(&dist, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(ops::to_vec_f64(&a.z).unwrap(), ops::to_vec_f64(&b.z).unwrap());
    }

    #[test]
    fn reparameterize_pathwise_gradient() {
        let dev = Device::Cpu;
        let mu = Var::from_tensor(&t(&[0.2, -0.3, 0.7], &[1, 1, 3])).unwrap();
        let sd = Var::from_tensor(&t(&[0.5, 1.5, 2.0], &[1, 1, 3])).unwrap();
        let var = sd.as_tensor().sqr().unwrap();
        let dist = CapsuleDistribution::new(mu.as_tensor().clone(), var).unwrap();
        let noise = Tensor::new(&[[[0.3f64, -1.2, 0.9]]], &dev).unwrap();
        let s = reparameterize_with_noise(&dist, &noise).unwrap();
        let grads = s.z.sum_all().unwrap().backward().unwrap();
        let gmu = ops::to_vec_f64(grads.get(mu.as_tensor()).unwrap()).unwrap();
        let gsd = ops::to_vec_f64(grads.get(sd.as_tensor()).unwrap()).unwrap();
        assert!(gmu.iter().all(|g| (g - 1.0).abs() < 1e-12));
        for (g, e) in gsd.iter().zip([0.3, -1.2, 0.9]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gauss_f64(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(
            kl_diag_gauss_f64(&[0.3, -2.0], &[0.5, 4.0], &[0.3, -2.0], &[0.5, 4.0]).unwrap(),
            0.0
        );
        assert!(kl_diag_gauss_f64(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        let tk = kl_diag_gauss(&t(&[1.0], &[1]), &t(&[1.0], &[1]), &t(&[0.0], &[1]), &t(&[1.0], &[1]))
            .unwrap();
        assert_eq!(ops::scalar_f64(&tk).unwrap(), 0.5);
        assert!(kl_diag_gauss(&t(&[1.0], &[1]), &t(&[-1.0], &[1]), &t(&[0.0], &[1]), &t(&[1.0], &[1]))
            .is_err());
    }

    #[test]
    fn kl_against_standard_normal_matches_closed_form() {
        // -1/2 Σ (1 + log σ² - μ² - σ²)
        let mu = [0.4, -1.1, 2.0];
        let var = [0.3, 1.7, 0.9];
        let closed: f64 = -0.5
            * mu.iter()
                .zip(var)
                .map(|(m, v)| 1.0 + f64::ln(v) - m * m - v)
                .sum::<f64>();
        let ours = kl_diag_gauss_f64(&mu, &var, &[0.0; 3], &[1.0; 3]).unwrap();
        assert!((closed - ours).abs() < 1e-14);
    }

    #[test]
    fn capsule_distance_shift_and_equality() {
        let (k, d, delta) = (3usize, 4usize, 0.7f64);
        let tmu = Tensor::randn(0f64, 1.0, (k, d), &Device::Cpu).unwrap();
        let ones = tmu.ones_like().unwrap();
        let c = CapsuleDistribution::new(
            (&tmu + delta).unwrap().unsqueeze(0).unwrap(),
            ones.unsqueeze(0).unwrap(),
        )
        .unwrap();
        let dist = ops::to_vec_f64(&capsule_distance(&c, &tmu, &ones).unwrap()).unwrap();
        assert!((dist[0] - d as f64 * delta * delta / 2.0).abs() < 1e-12);
        let same = CapsuleDistribution::new(tmu.unsqueeze(0).unwrap(), ones.unsqueeze(0).unwrap()).unwrap();
        assert_eq!(ops::to_vec_f64(&capsule_distance(&same, &tmu, &ones).unwrap()).unwrap()[0], 0.0);
    }

    #[test]
    fn posterior_examples() {
        let p = class_posterior(&[2.0, 2.0, 2.0, 2.0], 1.0).unwrap();
        assert!(p.probs.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let p = class_posterior(&[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert!((p.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = class_posterior(&[1e6, 0.0, 1e6], 1.0).unwrap();
        assert!(p.probs[1] >= 1.0 - 1e-9);
        assert!(p.probs.iter().all(|x| x.is_finite()));
        assert!(class_posterior(&[], 1.0).is_err());
        assert!(class_posterior(&[1.0], 0.0).is_err());
    }
}
