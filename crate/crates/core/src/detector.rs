//! Open-set decisions: distance-threshold rejection, per-class Gaussian
//! density fits with an L2 fallback, and retention-quantile calibration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ops;
use crate::targets::TargetBank;
use crate::variational::{argmax, argmin, CapsuleDistribution};

/// Floor on fitted per-dimension class variances.
pub const FIT_VARIANCE_FLOOR: f64 = 1e-6;

pub const DEFAULT_RETENTION: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Known(usize),
    Unknown,
}

impl Decision {
    /// Label in `0..=K`, with `K` standing for unknown.
    pub fn as_label(self, k: usize) -> usize {
        match self {
            Decision::Known(c) => c,
            Decision::Unknown => k,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    DistanceThreshold,
    DensityFit,
}

/// How density mode labels a sample it accepts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityLabeling {
    #[default]
    MaxLogDensity,
    MinCapsuleDistance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetPrediction {
    pub decision: Decision,
    /// Higher means more likely known.
    pub knownness_score: f64,
    /// Capsule-to-target distances (distance mode) or negated class log-densities (density mode).
    pub distances: Vec<f64>,
    pub detector_used: DetectorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussianFit {
    pub classes: Vec<ClassGaussian>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Distance mode: accept iff `knownness_score >= tau`.
    pub tau: Option<f64>,
    /// Density mode: per-class log-density thresholds.
    pub tau_per_class: Option<Vec<f64>>,
    /// Density mode fallback: reject when the nearest class mean is farther than this.
    pub tau_l2: Option<f64>,
    pub retention: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau: None,
            tau_per_class: None,
            tau_l2: None,
            retention: DEFAULT_RETENTION,
        }
    }
}

/// `-min_k distances`.
pub fn knownness_score(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(invalid!("knownness score of an empty distance vector"));
    }
    Ok(-distances.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Threshold keeping at least `retention` of `scores`: the ascending order
/// statistic at index `floor((1 - retention) · n)`. Accept iff `score >= tau`.
pub fn calibrate_threshold(scores: &[f64], retention: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid!("cannot calibrate on an empty score list"));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(invalid!("retention {retention} outside (0, 1]"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("NaN calibration score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let idx = rejected_budget(n, retention).min(n - 1);
    Ok(sorted[idx])
}

/// `floor((1 - retention) · n)`, guarded against representation error in the product.
pub fn rejected_budget(n: usize, retention: f64) -> usize {
    let raw = (1.0 - retention) * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

/// Distance-mode decision from precomputed capsule-to-target distances.
pub fn decide_by_distance(distances: &[f64], thresholds: &Thresholds) -> Result<OpenSetPrediction> {
    let tau = thresholds
        .tau
        .ok_or_else(|| Error::Precondition("distance threshold is not calibrated".into()))?;
    let score = knownness_score(distances)?;
    let decision = if score < tau {
        Decision::Unknown
    } else {
        Decision::Known(argmin(distances))
    };
    Ok(OpenSetPrediction {
        decision,
        knownness_score: score,
        distances: distances.to_vec(),
        detector_used: DetectorKind::DistanceThreshold,
    })
}

/// Distance-mode decisions for every sample of `c`.
pub fn predict_open_set(
    c: &CapsuleDistribution,
    bank: &TargetBank,
    thresholds: &Thresholds,
) -> Result<Vec<OpenSetPrediction>> {
    if thresholds.tau.is_none() {
        return Err(Error::Precondition("distance threshold is not calibrated".into()));
    }
    let dist = bank.distances(c)?;
    let (b, k) = dist.dims2()?;
    let flat = ops::to_vec_f64(&dist)?;
    (0..b)
        .map(|i| decide_by_distance(&flat[i * k..(i + 1) * k], thresholds))
        .collect()
}

/// Per-class mean and unbiased variance of the latents of correctly classified samples.
pub fn fit_class_gaussians(
    latents: &[Vec<f64>],
    labels: &[usize],
    predictions: &[usize],
    k: usize,
) -> Result<ClassGaussianFit> {
    if latents.len() != labels.len() || labels.len() != predictions.len() {
        return Err(invalid!("latents, labels and predictions must have equal lengths"));
    }
    let dim = latents.first().map(Vec::len).unwrap_or(0);
    if latents.iter().any(|z| z.len() != dim) {
        return Err(invalid!("latents must share a dimension"));
    }
    let mut classes = Vec::with_capacity(k);
    for class in 0..k {
        let members: Vec<&Vec<f64>> = latents
            .iter()
            .zip(labels.iter().zip(predictions))
            .filter(|(_, (y, p))| **y == class && **p == class)
            .map(|(z, _)| z)
            .collect();
        let n = members.len();
        if n < 2 {
            return Err(Error::Calibration {
                class,
                reason: format!("{n} correctly classified samples, need at least 2"),
            });
        }
        let mut mean = vec![0.0; dim];
        for z in &members {
            for (m, v) in mean.iter_mut().zip(z.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut variance = vec![0.0; dim];
        for z in &members {
            for ((s, v), m) in variance.iter_mut().zip(z.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        variance
            .iter_mut()
            .for_each(|s| *s = (*s / (n - 1) as f64).max(FIT_VARIANCE_FLOOR));
        classes.push(ClassGaussian {
            mean,
            variance,
            count: n,
        });
    }
    Ok(ClassGaussianFit { classes })
}

/// Log-density of a diagonal Gaussian.
pub fn log_density(z: &[f64], mean: &[f64], variance: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    z.iter()
        .zip(mean)
        .zip(variance)
        .map(|((x, m), v)| -0.5 * (ln_2pi + v.ln() + (x - m).powi(2) / v))
        .sum()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl ClassGaussianFit {
    pub fn log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.classes
            .iter()
            .map(|c| log_density(z, &c.mean, &c.variance))
            .collect()
    }

    pub fn nearest_centroid_distance(&self, z: &[f64]) -> f64 {
        self.classes
            .iter()
            .map(|c| l2(z, &c.mean))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-class log-density thresholds and the L2 fallback threshold, each keeping
/// `retention` of the supplied samples.
pub fn calibrate_density_thresholds(
    fit: &ClassGaussianFit,
    latents: &[Vec<f64>],
    labels: &[usize],
    retention: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = fit.classes.len();
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let g = &fit.classes[class];
        let scores: Vec<f64> = latents
            .iter()
            .zip(labels)
            .filter(|(_, y)| **y == class)
            .map(|(z, _)| log_density(z, &g.mean, &g.variance))
            .collect();
        if scores.is_empty() {
            return Err(Error::Calibration {
                class,
                reason: "no calibration samples".into(),
            });
        }
        per_class.push(calibrate_threshold(&scores, retention)?);
    }
    let negated: Vec<f64> = latents
        .iter()
        .map(|z| -fit.nearest_centroid_distance(z))
        .collect();
    let tau_l2 = -calibrate_threshold(&negated, retention)?;
    Ok((per_class, tau_l2))
}

/// Density-mode decision for one flattened latent `[K·d]`.
///
/// Unknown when every class log-density is below its threshold or the nearest
/// class mean is farther than `tau_l2`. Accepted samples are labelled by
/// `labeling`; `capsule_distances` is required for
/// [`DensityLabeling::MinCapsuleDistance`].
pub fn density_predict(
    latent: &[f64],
    fit: &ClassGaussianFit,
    thresholds: &Thresholds,
    labeling: DensityLabeling,
    capsule_distances: Option<&[f64]>,
) -> Result<OpenSetPrediction> {
    let taus = thresholds
        .tau_per_class
        .as_ref()
        .ok_or_else(|| Error::Precondition("density thresholds are not calibrated".into()))?;
    let tau_l2 = thresholds
        .tau_l2
        .ok_or_else(|| Error::Precondition("L2 fallback threshold is not calibrated".into()))?;
    if taus.len() != fit.classes.len() {
        return Err(invalid!("{} thresholds for {} classes", taus.len(), fit.classes.len()));
    }
    if let Some(c) = fit.classes.first() {
        if c.mean.len() != latent.len() {
            return Err(invalid!("latent of size {} for fits of size {}", latent.len(), c.mean.len()));
        }
    }
    let log_dens = fit.log_densities(latent);
    let all_low = log_dens.iter().zip(taus).all(|(l, t)| l < t);
    let too_far = fit.nearest_centroid_distance(latent) > tau_l2;
    let label = match labeling {
        DensityLabeling::MaxLogDensity => argmax(&log_dens),
        DensityLabeling::MinCapsuleDistance => {
            let d = capsule_distances
                .ok_or_else(|| invalid!("capsule distances required for min-distance labelling"))?;
            argmin(d)
        }
    };
    let decision = if all_low || too_far {
        Decision::Unknown
    } else {
        Decision::Known(label)
    };
    Ok(OpenSetPrediction {
        decision,
        knownness_score: log_dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        distances: log_dens.iter().map(|l| -l).collect(),
        detector_used: DetectorKind::DensityFit,
    })
}
