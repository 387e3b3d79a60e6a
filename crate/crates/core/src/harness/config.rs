//! Experiment configuration: TOML with a documented default for every key,
//! unknown keys rejected, and `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{DensityLabeling, DetectorKind, DEFAULT_RETENTION};
use crate::error::{Error, Result};
use crate::model::{LossSettings, ModelConfig};
use crate::params::AdamSettings;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: AdamSettings,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set, overriding `epochs`.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub precision: Precision,
    /// Share of each known class held out of training for threshold calibration.
    pub calibration_fraction: f64,
    pub lr_schedule: LrSchedule,
    /// Training images are shifted by up to this many pixels per axis (zero fill).
    pub augment_shift: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the configured rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning-rate multiplier for optimizer step `step` of `total`.
    pub fn scale(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: AdamSettings::default(),
            epochs: 8,
            max_steps: None,
            batch_size: 32,
            precision: Precision::F32,
            calibration_fraction: 0.1,
            lr_schedule: LrSchedule::Constant,
            augment_shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub labeling: DensityLabeling,
    pub retention: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::DistanceThreshold,
            labeling: DensityLabeling::MaxLogDensity,
            retention: DEFAULT_RETENTION,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Parameter initialization and per-step sampling.
    pub init: u64,
    /// Splits, subsampling and shuffling.
    pub data: u64,
    /// Synthetic noise images.
    pub noise: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` in one directory.
    #[default]
    Idx,
    /// `train/<class>/*` and `test/<class>/*` image folders.
    ImageFolder,
}

/// Where the unknown test samples come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownSource {
    /// Test images of the split's unknown classes.
    #[default]
    SplitClasses,
    /// Uniform noise images.
    Noise,
    /// Test images of the unknown classes superimposed on noise.
    MnistNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: String,
    pub format: DatasetFormat,
    /// Defaults to `$CAPSOSR_DATA_DIR/<dataset>`.
    pub dir: Option<PathBuf>,
    pub n_classes: usize,
    pub split_file: Option<PathBuf>,
    pub split_index: usize,
    pub unknowns: UnknownSource,
    /// Cap on training images per known class.
    pub train_per_class: Option<usize>,
    /// Cap on test images per class.
    pub test_per_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: "mnist".into(),
            format: DatasetFormat::Idx,
            dir: None,
            n_classes: 10,
            split_file: None,
            split_index: 0,
            unknowns: UnknownSource::SplitClasses,
            train_per_class: None,
            test_per_class: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossSettings,
    pub training: TrainingConfig,
    pub detector: DetectorConfig,
    pub seeds: SeedConfig,
    pub data: DataConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(config_err)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = root.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.calibration_fraction) {
            return Err(Error::Config("training.calibration_fraction must be in [0, 1)".into()));
        }
        if !(self.detector.retention > 0.0 && self.detector.retention <= 1.0) {
            return Err(Error::Config("detector.retention must be in (0, 1]".into()));
        }
        if self.model.routing_iterations == 0 {
            return Err(Error::Config("model.routing_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.model.lateral_dropout) {
            return Err(Error::Config("model.lateral_dropout must be in [0, 1]".into()));
        }
        if self.model.k >= self.data.n_classes {
            return Err(Error::Config(format!(
                "model.k = {} leaves no unknown classes among {}",
                self.model.k, self.data.n_classes
            )));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut node = root;
    for part in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a config section")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a config section")))?
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[loss]\nalpah = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[modle]\n").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["loss.alpha=2", "model.encoder=residual-small", "data.dir=/tmp/x"])
            .unwrap();
        assert_eq!(cfg.loss.alpha, 2.0);
        assert_eq!(cfg.model.encoder, crate::model::EncoderPreset::ResidualSmall);
        assert_eq!(cfg.data.dir, Some(PathBuf::from("/tmp/x")));
        assert!(ExperimentConfig::default().with_overrides(&["loss.nope=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["training.batch_size=0"]).is_err());
    }
}
