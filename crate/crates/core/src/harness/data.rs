//! Assembles the closed training set, the calibration slice and the open test set.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, DatasetFormat, ExperimentConfig, UnknownSource};
use crate::error::{invalid, Result};
use crate::protocol::{
    data_root, load_image_folder, load_mnist, make_splits, synth_mnist_noise, synth_noise_dataset, ImageSet,
    SplitFile, SplitSpec,
};

/// Data for one open-set experiment. Known samples carry labels `0..K`
/// (their index in `split.known_classes`); unknown test samples carry `K`.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub split: SplitSpec,
    pub train: ImageSet,
    pub calibration: ImageSet,
    pub test: ImageSet,
}

impl ExperimentData {
    pub fn num_known(&self) -> usize {
        self.split.num_known()
    }
}

pub fn dataset_dir(cfg: &DataConfig) -> PathBuf {
    cfg.dir.clone().unwrap_or_else(|| data_root().join(&cfg.dataset))
}

/// The split named by the config: entry `split_index` of `split_file`, or of
/// freshly drawn splits seeded by `seeds.data` when no file is given.
pub fn resolve_split(cfg: &ExperimentConfig) -> Result<SplitSpec> {
    let file = match &cfg.data.split_file {
        Some(path) => SplitFile::load(path)?,
        None => make_splits(
            &cfg.data.dataset,
            cfg.data.n_classes,
            cfg.data.split_index + 1,
            cfg.model.k,
            cfg.seeds.data,
        )?,
    };
    let specs = file.specs()?;
    let spec = specs
        .get(cfg.data.split_index)
        .cloned()
        .ok_or_else(|| invalid!("split index {} out of range ({} splits)", cfg.data.split_index, specs.len()))?;
    if spec.num_known() != cfg.model.k {
        return Err(invalid!(
            "split has {} known classes but the model is configured for {}",
            spec.num_known(),
            cfg.model.k
        ));
    }
    Ok(spec)
}

/// First `cap` samples of each class in `classes`, in file order.
fn cap_per_class(set: &ImageSet, cap: Option<usize>) -> ImageSet {
    let Some(cap) = cap else {
        return set.clone();
    };
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let idx: Vec<usize> = (0..set.len())
        .filter(|&i| {
            let n = seen.entry(set.labels[i]).or_default();
            *n += 1;
            *n <= cap
        })
        .collect();
    set.subset(&idx)
}

fn load_raw(cfg: &DataConfig) -> Result<(ImageSet, ImageSet)> {
    let dir = dataset_dir(cfg);
    match cfg.format {
        DatasetFormat::Idx => Ok((load_mnist(&dir, true)?, load_mnist(&dir, false)?)),
        DatasetFormat::ImageFolder => {
            // probe the first training image for the shape
            let first = std::fs::read_dir(dir.join("train"))
                .map_err(|e| crate::error::Error::io(dir.join("train"), e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .flat_map(|d| std::fs::read_dir(d.path()).into_iter().flatten().filter_map(|e| e.ok()))
                .map(|e| e.path())
                .next()
                .ok_or_else(|| invalid!("no images under {}", dir.join("train").display()))?;
            let img = image::open(&first).map_err(|e| crate::error::Error::Format {
                path: first.clone(),
                reason: e.to_string(),
            })?;
            let (h, w) = (img.height() as usize, img.width() as usize);
            let channels = if img.color().channel_count() >= 3 { 3 } else { 1 };
            let (train, _) = load_image_folder(&dir.join("train"), channels, h, w)?;
            let (test, _) = load_image_folder(&dir.join("test"), channels, h, w)?;
            Ok((train, test))
        }
    }
}

/// Builds the experiment sets from already loaded train/test images.
pub fn assemble(cfg: &ExperimentConfig, split: SplitSpec, train_all: &ImageSet, test_all: &ImageSet) -> Result<ExperimentData> {
    let k = split.num_known();
    let m = &cfg.model;
    if train_all.shape() != (m.in_channels, m.height, m.width) {
        return Err(invalid!(
            "images are {:?} but the model expects {:?}",
            train_all.shape(),
            (m.in_channels, m.height, m.width)
        ));
    }
    let known_train = cap_per_class(&train_all.select_classes(&split.known_classes), cfg.data.train_per_class);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data ^ 0x5eed_ca1b);
    let mut train_idx = Vec::new();
    let mut cal_idx = Vec::new();
    for class in 0..k {
        let mut members: Vec<usize> = (0..known_train.len()).filter(|&i| known_train.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_cal = (members.len() as f64 * cfg.training.calibration_fraction).round() as usize;
        cal_idx.extend_from_slice(&members[..n_cal]);
        train_idx.extend_from_slice(&members[n_cal..]);
    }
    train_idx.sort_unstable();
    cal_idx.sort_unstable();
    let train = known_train.subset(&train_idx);
    let calibration = known_train.subset(&cal_idx);

    let known_test = cap_per_class(&test_all.select_classes(&split.known_classes), cfg.data.test_per_class);
    let unknown_digits = cap_per_class(&test_all.select_classes(&split.unknown_classes), cfg.data.test_per_class)
        .with_labels(k);
    let unknown = match cfg.data.unknowns {
        UnknownSource::SplitClasses => unknown_digits,
        UnknownSource::Noise => synth_noise_dataset(unknown_digits.len().max(1), unknown_digits.shape(), k, cfg.seeds.noise)?,
        UnknownSource::MnistNoise => {
            let noise = synth_noise_dataset(unknown_digits.len().max(1), unknown_digits.shape(), k, cfg.seeds.noise)?;
            synth_mnist_noise(&unknown_digits, &noise)?
        }
    };
    let test = known_test.concat(&unknown)?;
    Ok(ExperimentData {
        split,
        train,
        calibration,
        test,
    })
}

pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let split = resolve_split(cfg)?;
    let (train_all, test_all) = load_raw(&cfg.data)?;
    assemble(cfg, split, &train_all, &test_all)
}
