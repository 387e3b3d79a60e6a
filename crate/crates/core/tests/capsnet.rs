mod oracles;

use candle_core::{DType, Device, Tensor};
use capsosr::capsnet::{
    dynamic_routing, pose_transform, squash, PoseWeights, PrimaryCapsules, RoutingMode, RoutingNormalization,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn predictions_tensor(u_hat: &[Vec<Vec<f64>>]) -> Tensor {
    let n = u_hat.len();
    let k = u_hat[0].len();
    let f2 = u_hat[0][0].len();
    let flat: Vec<f64> = u_hat.iter().flatten().flatten().cloned().collect();
    Tensor::from_vec(flat, (1, n, k, f2), &Device::Cpu).unwrap()
}

fn random_predictions(rng: &mut ChaCha8Rng, n: usize, k: usize, f2: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| (0..k).map(|_| (0..f2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect()
}

#[test]
fn pose_transform_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k, f1, f2) = (2, 2, 3, 3);
    let u: Vec<Vec<f64>> = (0..n).map(|_| (0..f1).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let w: Vec<Vec<Vec<Vec<f64>>>> = (0..n)
        .map(|_| (0..k).map(|_| (0..f2).map(|_| (0..f1).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).collect())
        .collect();
    let caps = PrimaryCapsules {
        capsules: Tensor::from_vec(u.concat(), (1, n, f1), &Device::Cpu).unwrap(),
        grid: (1, 1, n),
    };
    let wt: Vec<f64> = w.iter().flatten().flatten().flatten().cloned().collect();
    let weights = PoseWeights {
        weights: Tensor::from_vec(wt, (n, k, f2, f1), &Device::Cpu).unwrap(),
    };
    let got = pose_transform(&caps, &weights).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let want: Vec<f64> = oracles::pose(&u, &w).into_iter().flatten().flatten().collect();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn routing_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..40 {
        let n = 1 + trial % 4;
        let k = 1 + trial % 3;
        let f2 = 1 + (trial / 3) % 3;
        let u_hat = random_predictions(&mut rng, n, k, f2);
        let gate = if trial % 2 == 0 { None } else { Some(rng.random_range(-0.3..0.1)) };
        let mode = match gate {
            Some(g) => RoutingMode::Gated {
                gate_bias: Tensor::new(&[g], &Device::Cpu).unwrap(),
            },
            None => RoutingMode::Standard,
        };
        let (caps, state) =
            dynamic_routing(&predictions_tensor(&u_hat), 3, &mode, RoutingNormalization::OverOutputs).unwrap();
        let reference = oracles::routing(&u_hat, 3, gate);
        let v = caps.capsules.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in v.iter().zip(reference.v.iter().flatten()) {
            assert!((a - b).abs() < 1e-10, "trial {trial}: {a} vs {b}");
        }
        for (it, c) in state.coefficient_trace.iter().enumerate() {
            let c = c.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in c.iter().zip(reference.coefficients[it].iter().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn agreement_cluster_gains_coupling() {
    // Capsules 0 and 1 predict the same pose for class 0; capsule 2 points elsewhere.
    let agree = vec![0.9, 0.3, 0.0];
    let u_hat = vec![
        vec![agree.clone(), vec![0.1, -0.2, 0.05]],
        vec![agree.clone(), vec![-0.1, 0.1, 0.0]],
        vec![vec![0.0, 0.0, 0.8], vec![0.0, 0.7, -0.7]],
    ];
    let reference = oracles::routing(&u_hat, 3, None);
    let (_, state) =
        dynamic_routing(&predictions_tensor(&u_hat), 3, &RoutingMode::Standard, RoutingNormalization::OverOutputs)
            .unwrap();
    let trace: Vec<Vec<f64>> = state
        .coefficient_trace
        .iter()
        .map(|c| c.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .collect();
    for i in [0usize, 1] {
        let seq: Vec<f64> = trace.iter().map(|c| c[i * 2]).collect();
        let ref_seq: Vec<f64> = reference.coefficients.iter().map(|c| c[i][0]).collect();
        assert!(seq[0] < seq[1] && seq[1] < seq[2], "capsule {i}: {seq:?}");
        for (a, b) in seq.iter().zip(&ref_seq) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gated_coefficients_cut_to_zero() {
    let u_hat = random_predictions(&mut ChaCha8Rng::seed_from_u64(1), 3, 4, 2);
    let mode = RoutingMode::Gated {
        gate_bias: Tensor::new(&[-0.25f64], &Device::Cpu).unwrap(),
    };
    let (caps, state) =
        dynamic_routing(&predictions_tensor(&u_hat), 1, &mode, RoutingNormalization::OverOutputs).unwrap();
    let c = state.coefficients.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(c.iter().all(|&x| x == 0.0));
    let v = caps.capsules.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn gated_shrinkage_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let u_hat = random_predictions(&mut rng, 4, 3, 3);
        let bias = rng.random_range(-0.4..0.2);
        let t = predictions_tensor(&u_hat);
        let (_, standard) = dynamic_routing(&t, 1, &RoutingMode::Standard, RoutingNormalization::OverOutputs).unwrap();
        let gated_mode = RoutingMode::Gated {
            gate_bias: Tensor::new(&[bias], &Device::Cpu).unwrap(),
        };
        let (_, gated) = dynamic_routing(&t, 1, &gated_mode, RoutingNormalization::OverOutputs).unwrap();
        let s = standard.coefficients.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = gated.coefficients.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in g.iter().zip(&s) {
            assert!(*a >= 0.0 && *a <= (b + bias).max(0.0) + 1e-15);
        }
    }
}

#[test]
fn permuting_output_slots_permutes_capsules() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, k, f1, f2) = (3, 3, 2, 2);
    let u: Vec<f64> = (0..n * f1).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n * k * f2 * f1).map(|_| rng.random_range(-1.0..1.0)).collect();
    let caps = PrimaryCapsules {
        capsules: Tensor::from_vec(u, (1, n, f1), &Device::Cpu).unwrap(),
        grid: (1, 1, n),
    };
    let w = Tensor::from_vec(w, (n, k, f2, f1), &Device::Cpu).unwrap();
    let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
    let run = |weights: Tensor| {
        let pred = pose_transform(&caps, &PoseWeights { weights }).unwrap();
        dynamic_routing(&pred, 3, &RoutingMode::Standard, RoutingNormalization::OverOutputs)
            .unwrap()
            .0
            .capsules
    };
    let base = run(w.clone());
    let permuted = run(w.index_select(&perm, 1).unwrap());
    let expect = base.index_select(&perm, 1).unwrap();
    let diff = (permuted - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn seeded_predictions_are_row_stochastic_over_iterations() {
    let u_hat = random_predictions(&mut ChaCha8Rng::seed_from_u64(3), 6, 5, 4);
    let (_, state) =
        dynamic_routing(&predictions_tensor(&u_hat), 5, &RoutingMode::Standard, RoutingNormalization::OverOutputs)
            .unwrap();
    for c in &state.coefficient_trace {
        let sums = c.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }
}

#[test]
fn routing_rejects_zero_iterations() {
    let t = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
    assert!(dynamic_routing(&t, 0, &RoutingMode::Standard, RoutingNormalization::OverOutputs).is_err());
}

proptest! {
    #[test]
    fn squash_bounds_and_direction(v in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let s = squash(&v).unwrap();
        let norm_v = oracles::dot(&v, &v).sqrt();
        let norm_s = oracles::dot(&s, &s).sqrt();
        prop_assert!(norm_s < 1.0);
        if norm_v == 0.0 {
            prop_assert_eq!(norm_s, 0.0);
        } else {
            prop_assert!((oracles::dot(&s, &v) - norm_s * norm_v).abs() <= 1e-9 * (1.0 + norm_s * norm_v));
            let want = oracles::squash(&v);
            for (a, b) in s.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_rows_sum_to_one(seed in 0u64..1000, n in 1usize..5, k in 1usize..4, iters in 1usize..5) {
        let u_hat = random_predictions(&mut ChaCha8Rng::seed_from_u64(seed), n, k, 3);
        let (_, state) = dynamic_routing(&predictions_tensor(&u_hat), iters, &RoutingMode::Standard, RoutingNormalization::OverOutputs).unwrap();
        for c in &state.coefficient_trace {
            let sums = c.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
