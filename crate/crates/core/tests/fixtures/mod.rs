//! Small deterministic datasets and configs shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use capsosr::harness::{ExperimentConfig, ExperimentData};
use capsosr::model::ModelConfig;
use capsosr::protocol::{ImageSet, SplitSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The MNIST subset shipped under `data/mnist`.
pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// 8×8 images of `n_classes` classes: class `c` lights up column block `c`
/// over a faint noise floor.
pub fn toy_images(n_classes: usize, per_class: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * n_classes {
        let class = i % n_classes;
        for row in 0..8 {
            for col in 0..8 {
                let lit = col % n_classes == class && row % 2 == class % 2;
                let base = if lit { 0.8 } else { 0.05 };
                pixels.push((base + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    ImageSet::new(1, 8, 8, pixels, labels).unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        k: 3,
        d: 4,
        f1: 4,
        f2: 4,
        primary_maps: 2,
        height: 8,
        width: 8,
        ..ModelConfig::default()
    }
}

pub fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = tiny_model();
    cfg.data.dataset = "toy".into();
    cfg.data.n_classes = 4;
    cfg.training.batch_size = 8;
    cfg.training.epochs = 6;
    cfg.training.optimizer.learning_rate = 5e-3;
    cfg.seeds.init = 11;
    cfg.seeds.data = 12;
    cfg.seeds.noise = 13;
    cfg
}

/// Classes 0..3 known, class 3 unknown.
pub fn toy_data(cfg: &ExperimentConfig) -> ExperimentData {
    let split = SplitSpec {
        dataset: "toy".into(),
        seed: 0,
        known_classes: vec![0, 1, 2],
        unknown_classes: vec![3],
        openness: capsosr::protocol::openness(3, 4).unwrap(),
    };
    let train = toy_images(4, 24, 1);
    let test = toy_images(4, 10, 2);
    capsosr::harness::assemble(cfg, split, &train, &test).unwrap()
}
