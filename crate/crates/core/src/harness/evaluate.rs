//! Threshold calibration and open-set evaluation of a trained checkpoint.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::data::ExperimentData;
use super::train::model_from_checkpoint;
use crate::detector::{
    calibrate_density_thresholds, calibrate_threshold, density_predict, fit_class_gaussians, knownness_score,
    rejected_budget, ClassGaussianFit, Decision, DetectorKind, Thresholds,
};
use crate::error::{invalid, Error, Result};
use crate::loss::LossMode;
use crate::model::{CapsOsrModel, Inference, LossSettings};
use crate::protocol::{auroc, closed_set_accuracy, macro_f1, ImageSet, MetricsReport};
use crate::variational::argmin;

const EVAL_BATCH: usize = 100;

/// Deterministic inference over a whole image set.
pub fn infer_set(model: &CapsOsrModel, set: &ImageSet, mode: LossMode) -> Result<Inference> {
    let mut out = Inference::default();
    let mut start = 0;
    while start < set.len() {
        let end = (start + EVAL_BATCH).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = set.subset(&idx);
        let x = model.input_tensor(&batch.pixels, batch.len())?;
        out.extend(model.infer(&x, mode)?);
        start = end;
    }
    Ok(out)
}

/// Knownness of one sample from its class distances. The softmax baseline is
/// scored by its maximum class probability, every other objective by the
/// negated smallest distance.
pub fn knownness(distances: &[f64], loss: &LossSettings) -> Result<f64> {
    match loss.mode {
        LossMode::SoftmaxBaseline => {
            let best = distances.iter().cloned().fold(f64::INFINITY, f64::min);
            let z: f64 = distances.iter().map(|d| (-loss.gamma * (d - best)).exp()).sum();
            Ok(1.0 / z)
        }
        _ => knownness_score(distances),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub retention: f64,
    /// Correctly classified calibration samples the thresholds were set on.
    pub n_calibration: usize,
    pub distance_tau: f64,
    /// Share of those samples the distance detector accepts.
    pub distance_acceptance: f64,
    pub density_tau_per_class: Vec<f64>,
    pub density_tau_l2: f64,
    pub density_acceptance: f64,
    pub fit_counts: Vec<usize>,
}

fn correct_subset(inf: &Inference, labels: &[usize]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| inf.predictions[i] == labels[i]).collect()
}

/// Fits class Gaussians on correctly classified training samples and sets
/// both detectors' thresholds on correctly classified calibration samples
/// (the training samples when the calibration slice is empty).
pub fn calibrate(ckpt: &mut Checkpoint, data: &ExperimentData) -> Result<CalibrationReport> {
    let cfg = ckpt.config.clone();
    let k = cfg.model.k;
    let model = model_from_checkpoint(ckpt)?;
    let retention = cfg.detector.retention;

    let train_inf = infer_set(&model, &data.train, cfg.loss.mode)?;
    let fit = fit_class_gaussians(&train_inf.latents, &data.train.labels, &train_inf.predictions, k)?;

    let (cal_inf, cal_labels) = if data.calibration.is_empty() {
        (train_inf, data.train.labels.clone())
    } else {
        (infer_set(&model, &data.calibration, cfg.loss.mode)?, data.calibration.labels.clone())
    };
    let correct = correct_subset(&cal_inf, &cal_labels);
    if correct.is_empty() {
        return Err(Error::Calibration {
            class: 0,
            reason: "no correctly classified calibration samples".into(),
        });
    }
    let scores: Vec<f64> = correct
        .iter()
        .map(|&i| knownness(&cal_inf.distances[i], &cfg.loss))
        .collect::<Result<_>>()?;
    let tau = calibrate_threshold(&scores, retention)?;
    let latents: Vec<Vec<f64>> = correct.iter().map(|&i| cal_inf.latents[i].clone()).collect();
    let labels: Vec<usize> = correct.iter().map(|&i| cal_labels[i]).collect();
    let (tau_per_class, tau_l2) = calibrate_density_thresholds(&fit, &latents, &labels, retention)?;

    let thresholds = Thresholds {
        tau: Some(tau),
        tau_per_class: Some(tau_per_class.clone()),
        tau_l2: Some(tau_l2),
        retention,
    };
    let distance_accepted = scores.iter().filter(|&&s| s >= tau).count();
    let density_accepted = latents
        .iter()
        .zip(&correct)
        .map(|(z, &i)| density_predict(z, &fit, &thresholds, cfg.detector.labeling, Some(&cal_inf.distances[i])))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .filter(|p| p.decision != Decision::Unknown)
        .count();
    let n = correct.len();
    debug_assert!(n - distance_accepted <= rejected_budget(n, retention));
    let report = CalibrationReport {
        retention,
        n_calibration: n,
        distance_tau: tau,
        distance_acceptance: distance_accepted as f64 / n as f64,
        density_tau_per_class: tau_per_class,
        density_tau_l2: tau_l2,
        density_acceptance: density_accepted as f64 / n as f64,
        fit_counts: fit.classes.iter().map(|c| c.count).collect(),
    };
    ckpt.thresholds = Some(thresholds);
    ckpt.class_fits = Some(fit);
    Ok(report)
}

/// Per-sample evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    /// `0..K` for known classes, `K` for unknown.
    pub label: usize,
    pub knownness: f64,
    pub closed_set_prediction: usize,
    /// Open-set decision as a label in `0..=K`.
    pub decision: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub detector: DetectorKind,
    pub samples: Vec<SampleScore>,
}

/// Metrics computed from exported per-sample scores.
pub fn metrics_from_samples(samples: &[SampleScore], k: usize) -> Result<MetricsReport> {
    let known: Vec<&SampleScore> = samples.iter().filter(|s| s.label < k).collect();
    let unknown: Vec<&SampleScore> = samples.iter().filter(|s| s.label == k).collect();
    if known.is_empty() {
        return Err(invalid!("evaluation set has no known samples"));
    }
    if samples.iter().any(|s| s.label > k || s.decision > k) {
        return Err(invalid!("labels must lie in 0..={k}"));
    }
    let known_scores: Vec<f64> = known.iter().map(|s| s.knownness).collect();
    let unknown_scores: Vec<f64> = unknown.iter().map(|s| s.knownness).collect();
    let auroc_value = if unknown.is_empty() {
        None
    } else {
        Some(auroc(&known_scores, &unknown_scores)?)
    };
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let y_pred: Vec<usize> = samples.iter().map(|s| s.decision).collect();
    let f1 = macro_f1(&y_true, &y_pred, k + 1)?;
    let closed_true: Vec<usize> = known.iter().map(|s| s.label).collect();
    let closed_pred: Vec<usize> = known.iter().map(|s| s.closed_set_prediction).collect();
    Ok(MetricsReport {
        auroc: auroc_value,
        macro_f1: f1.macro_f1,
        closed_set_accuracy: closed_set_accuracy(&closed_true, &closed_pred)?,
        per_class_f1: f1.per_class,
        degenerate_classes: f1.degenerate,
        n_known: known.len(),
        n_unknown: unknown.len(),
    })
}

/// Scores `test` (labels in `0..=K`) with the calibrated detector of `ckpt`.
pub fn evaluate(ckpt: &Checkpoint, test: &ImageSet) -> Result<EvalOutput> {
    let cfg = &ckpt.config;
    let k = cfg.model.k;
    if let Some(bad) = test.labels.iter().find(|&&y| y > k) {
        return Err(invalid!("test label {bad} does not fit a checkpoint with K = {k}"));
    }
    let thresholds = ckpt
        .thresholds
        .as_ref()
        .ok_or_else(|| Error::Precondition("checkpoint is not calibrated".into()))?;
    let model = model_from_checkpoint(ckpt)?;
    let inf = infer_set(&model, test, cfg.loss.mode)?;
    let kind = cfg.detector.kind;
    let fit: Option<&ClassGaussianFit> = ckpt.class_fits.as_ref();
    let mut samples = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let distances = &inf.distances[i];
        let (score, decision) = match kind {
            DetectorKind::DistanceThreshold => {
                let tau = thresholds
                    .tau
                    .ok_or_else(|| Error::Precondition("distance threshold is not calibrated".into()))?;
                let score = knownness(distances, &cfg.loss)?;
                let decision = if score < tau { k } else { argmin(distances) };
                (score, decision)
            }
            DetectorKind::DensityFit => {
                let fit = fit.ok_or_else(|| Error::Precondition("class fits are missing".into()))?;
                let p = density_predict(&inf.latents[i], fit, thresholds, cfg.detector.labeling, Some(distances))?;
                (p.knownness_score, p.decision.as_label(k))
            }
        };
        samples.push(SampleScore {
            label: test.labels[i],
            knownness: score,
            closed_set_prediction: inf.predictions[i],
            decision,
        });
    }
    Ok(EvalOutput {
        report: metrics_from_samples(&samples, k)?,
        detector: kind,
        samples,
    })
}
