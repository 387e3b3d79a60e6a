mod oracles;

use candle_core::{DType, Device, Tensor};
use capsosr::detector::{
    calibrate_density_thresholds, calibrate_threshold, decide_by_distance, density_predict, fit_class_gaussians,
    knownness_score, log_density, predict_open_set, rejected_budget, Decision, DensityLabeling, Thresholds,
    FIT_VARIANCE_FLOOR,
};
use capsosr::params::ParamStore;
use capsosr::targets::{TargetBank, TargetMode};
use capsosr::variational::CapsuleDistribution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn calibration_rejects_at_most_the_budget(scores in prop::collection::vec(-50.0f64..50.0, 1..300)) {
        let tau = calibrate_threshold(&scores, 0.95).unwrap();
        let rejected = scores.iter().filter(|&&s| s < tau).count();
        prop_assert!(rejected <= (0.05 * scores.len() as f64 + 1e-9).floor() as usize);
        prop_assert!(scores.contains(&tau));
    }

    #[test]
    fn acceptance_is_monotone_in_tau(
        scores in prop::collection::vec(-5.0f64..5.0, 1..50),
        t1 in -6.0f64..6.0,
        dt in 0.0f64..3.0,
    ) {
        let accepted = |tau: f64| scores.iter().filter(|&&s| s >= tau).count();
        prop_assert!(accepted(t1) >= accepted(t1 + dt));
    }
}

#[test]
fn twenty_sample_enumeration() {
    let mut scores: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    let tau = calibrate_threshold(&scores, 0.95).unwrap();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(tau, sorted[1]);
    assert_eq!(rejected_budget(20, 0.95), 1);
    assert_eq!(rejected_budget(100, 0.95), 5);
    assert_eq!(rejected_budget(19, 0.95), 0);
}

#[test]
fn fit_matches_textbook_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, dim) = (2, 5);
    let latents: Vec<Vec<f64>> = (0..20).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<usize> = (0..20).map(|i| i % k).collect();
    let mut preds = labels.clone();
    preds[0] = 1; // misclassified samples are excluded
    let fit = fit_class_gaussians(&latents, &labels, &preds, k).unwrap();
    for class in 0..k {
        let rows: Vec<Vec<f64>> = (0..20)
            .filter(|&i| labels[i] == class && preds[i] == class)
            .map(|i| latents[i].clone())
            .collect();
        let (mean, var) = oracles::mean_variance(&rows);
        let g = &fit.classes[class];
        assert_eq!(g.count, rows.len());
        for j in 0..dim {
            assert!((g.mean[j] - mean[j]).abs() < 1e-12);
            assert!((g.variance[j] - var[j].max(FIT_VARIANCE_FLOOR)).abs() < 1e-12);
        }
    }
    assert_eq!(fit.classes[0].count, 9);
}

#[test]
fn log_density_matches_loop() {
    let z: [f64; 3] = [0.3, -1.0, 2.0];
    let mean = [0.0, -0.5, 1.0];
    let var = [1.0, 0.25, 4.0];
    let mut hand = 0.0;
    for j in 0..3 {
        hand += -0.5 * (2.0 * std::f64::consts::PI * var[j]).ln() - (z[j] - mean[j]).powi(2) / (2.0 * var[j]);
    }
    assert!((log_density(&z, &mean, &var) - hand).abs() < 1e-12);
}

#[test]
fn density_calibration_keeps_retention() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 3;
    let latents: Vec<Vec<f64>> = (0..300)
        .map(|i| (0..4).map(|_| (i % k) as f64 * 3.0 + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..300).map(|i| i % k).collect();
    let fit = fit_class_gaussians(&latents, &labels, &labels, k).unwrap();
    let (per_class, tau_l2) = calibrate_density_thresholds(&fit, &latents, &labels, 0.95).unwrap();
    let thresholds = Thresholds {
        tau_per_class: Some(per_class.clone()),
        tau_l2: Some(tau_l2),
        ..Thresholds::default()
    };
    for class in 0..k {
        let members: Vec<&Vec<f64>> = latents.iter().zip(&labels).filter(|(_, y)| **y == class).map(|(z, _)| z).collect();
        let below = members
            .iter()
            .filter(|z| log_density(z, &fit.classes[class].mean, &fit.classes[class].variance) < per_class[class])
            .count();
        assert!(below <= 5);
    }
    let accepted = latents
        .iter()
        .filter(|z| density_predict(z, &fit, &thresholds, DensityLabeling::MaxLogDensity, None).unwrap().decision != Decision::Unknown)
        .count();
    assert!(accepted as f64 >= 0.9 * 300.0);
    let far = vec![100.0; 4];
    let p = density_predict(&far, &fit, &thresholds, DensityLabeling::MaxLogDensity, None).unwrap();
    assert_eq!(p.decision, Decision::Unknown);
    assert!(p.knownness_score.is_finite());
}

#[test]
fn batch_prediction_matches_per_sample_loop() {
    let (k, d, b) = (3, 2, 6);
    let bank = TargetBank::init(k, d, TargetMode::Learnable, vec![10.0; k], false, &mut ParamStore::new(DType::F64)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu: Vec<f64> = (0..b * k * d).map(|_| rng.random_range(-1.0..2.0)).collect();
    let var: Vec<f64> = (0..b * k * d).map(|_| rng.random_range(0.2..2.0)).collect();
    let c = CapsuleDistribution::new(
        Tensor::from_vec(mu.clone(), (b, k, d), &Device::Cpu).unwrap(),
        Tensor::from_vec(var.clone(), (b, k, d), &Device::Cpu).unwrap(),
    )
    .unwrap();
    let tm = bank.mu().to_vec3::<f64>().unwrap();
    let tv = bank.var().unwrap().to_vec3::<f64>().unwrap();
    let distances: Vec<Vec<f64>> = (0..b)
        .map(|s| {
            (0..k)
                .map(|t| {
                    let c_mu: Vec<Vec<f64>> = (0..k).map(|j| mu[(s * k + j) * d..(s * k + j + 1) * d].to_vec()).collect();
                    let c_var: Vec<Vec<f64>> = (0..k).map(|j| var[(s * k + j) * d..(s * k + j + 1) * d].to_vec()).collect();
                    oracles::capsule_distance(&c_mu, &c_var, &tm[t], &tv[t])
                })
                .collect()
        })
        .collect();
    let scores: Vec<f64> = distances.iter().map(|row| knownness_score(row).unwrap()).collect();
    let tau = calibrate_threshold(&scores, 0.5).unwrap();
    let thresholds = Thresholds { tau: Some(tau), ..Thresholds::default() };
    let batch = predict_open_set(&c, &bank, &thresholds).unwrap();
    for (s, p) in batch.iter().enumerate() {
        let single = decide_by_distance(&distances[s], &thresholds).unwrap();
        assert_eq!(p.decision, single.decision);
        assert!((p.knownness_score - scores[s]).abs() < 1e-9);
        assert!(p.knownness_score.is_finite());
    }
    assert!(predict_open_set(&c, &bank, &Thresholds::default()).is_err());
}
