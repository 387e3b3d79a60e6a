//! Deterministic single-worker training loop with exact resume.
//!
//! The minibatch of step `s` depends only on `(seeds.data, s)` and the
//! sampling noise only on `(seeds.init, s)`, so a run resumed from a
//! checkpoint retraces an uninterrupted one.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, StoredTensor};
use super::config::ExperimentConfig;
use super::runlog::{LogRecord, RunLog};
use crate::error::{invalid, Error, Result};
use crate::model::CapsOsrModel;
use crate::ops;
use crate::params::Adam;
use crate::protocol::ImageSet;
use crate::targets::min_pairwise_target_distance;

const ADAM_PREFIX: &str = "adam.";
const STEP_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const AUGMENT_SALT: u64 = 0xd1b5_4a32_d192_ed03;

pub struct Trainer {
    config: ExperimentConfig,
    model: CapsOsrModel,
    adam: Adam,
    step: u64,
    known_classes: Vec<usize>,
    last_loss: Option<f64>,
}

fn build_model(config: &ExperimentConfig) -> Result<CapsOsrModel> {
    CapsOsrModel::new(
        config.model.clone(),
        config.loss.margin,
        config.training.precision.dtype(),
        config.seeds.init,
    )
}

impl Trainer {
    pub fn new(config: ExperimentConfig, known_classes: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if known_classes.len() != config.model.k {
            return Err(invalid!("{} known classes for a model with K = {}", known_classes.len(), config.model.k));
        }
        let model = build_model(&config)?;
        let adam = Adam::new(config.training.optimizer.clone());
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
            known_classes,
            last_loss: None,
        })
    }

    /// Rebuilds model and optimizer state from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        let model = build_model(&config)?;
        restore_parameters(&model, ckpt)?;
        let mut moments = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            if name.starts_with(ADAM_PREFIX) {
                moments.insert(name.clone(), t.to_tensor()?.to_dtype(model.dtype())?);
            }
        }
        let adam = Adam::restore(config.training.optimizer.clone(), &ckpt.optimizer_steps, &moments)?;
        Ok(Trainer {
            config,
            model,
            adam,
            step: ckpt.step,
            known_classes: ckpt.known_classes.clone(),
            last_loss: ckpt.last_loss,
        })
    }

    pub fn model(&self) -> &CapsOsrModel {
        &self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.config.training.batch_size) as u64
    }

    /// The configured run length in optimizer steps.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.config
            .training
            .max_steps
            .unwrap_or(self.config.training.epochs as u64 * self.steps_per_epoch(n_train))
    }

    fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.data);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        let bs = self.config.training.batch_size;
        let start = (step % spe) as usize * bs;
        order[start..(start + bs).min(n)].to_vec()
    }

    /// Trains until `until` optimizer steps have been taken in total.
    pub fn run_until(&mut self, train: &ImageSet, until: u64, log: &mut RunLog) -> Result<()> {
        if train.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        if let Some(bad) = train.labels.iter().find(|&&y| y >= self.config.model.k) {
            return Err(invalid!("training label {bad} out of range for K = {}", self.config.model.k));
        }
        let spe = self.steps_per_epoch(train.len());
        while self.step < until {
            let idx = self.batch_indices(train.len(), self.step);
            let mut batch = train.subset(&idx);
            if self.config.training.augment_shift > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.data ^ AUGMENT_SALT);
                rng.set_stream(self.step);
                random_shift(&mut batch, self.config.training.augment_shift, &mut rng);
            }
            let x = self.model.input_tensor(&batch.pixels, batch.len())?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.init ^ STEP_STREAM_SALT);
            rng.set_stream(self.step);
            let value = self.model.training_loss(&x, &batch.labels, &self.config.loss, &mut rng)?;
            if !value.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    diagnostics: self.diagnostics(&batch, &value.breakdown)?,
                });
            }
            let grads = value.total.backward()?;
            let scale = self.config.training.lr_schedule.scale(self.step, self.total_steps(train.len()));
            self.adam.step_scaled(self.model.store(), &grads, scale)?;
            self.last_loss = Some(value.breakdown.total);
            log.push(LogRecord::Step {
                step: self.step,
                epoch: self.step / spe,
                loss: value.breakdown,
            })?;
            self.step += 1;
            if self.step % spe == 0 {
                log.push(LogRecord::Epoch {
                    epoch: self.step / spe - 1,
                    step: self.step,
                    min_pairwise_target_distance: min_pairwise_target_distance(self.model.bank())?,
                })?;
            }
        }
        Ok(())
    }

    fn diagnostics(&self, batch: &ImageSet, loss: &crate::loss::LossBreakdown) -> Result<String> {
        let px = &batch.pixels;
        let finite = px.iter().filter(|v| v.is_finite()).count();
        let (lo, hi) = px
            .iter()
            .filter(|v| v.is_finite())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mean = px.iter().filter(|v| v.is_finite()).map(|&v| v as f64).sum::<f64>() / finite.max(1) as f64;
        let x = self.model.input_tensor(px, batch.len())?;
        let enc = self.model.encode(&x)?;
        let mu = ops::to_vec_f64(&enc.dist.mu)?;
        let var = ops::to_vec_f64(&enc.dist.var)?;
        let range = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
        };
        Ok(format!(
            "batch of {} (labels {:?}); pixels: {} non-finite, range [{lo}, {hi}], mean {mean:.4}; \
             capsule mean range {:?}, variance range {:?}; loss terms kl={} contr={} rec={} ce={}",
            batch.len(),
            batch.labels,
            px.len() - finite,
            range(&mu),
            range(&var),
            loss.kl_term,
            loss.contrastive_term,
            loss.reconstruction_term,
            loss.cross_entropy_term
        ))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (name, p) in self.model.store().iter() {
            tensors.insert(name.clone(), StoredTensor::from_tensor(p.var.as_tensor())?);
        }
        let (moments, optimizer_steps) = self.adam.state();
        for (name, t) in moments {
            tensors.insert(name, StoredTensor::from_tensor(&t)?);
        }
        Ok(Checkpoint {
            config: self.config.clone(),
            step: self.step,
            known_classes: self.known_classes.clone(),
            tensors,
            optimizer_steps,
            last_loss: self.last_loss,
            thresholds: None,
            class_fits: None,
        })
    }
}

/// Translates every image by a uniform offset in `[-max_shift, max_shift]²`, filling with zeros.
fn random_shift(set: &mut ImageSet, max_shift: usize, rng: &mut ChaCha8Rng) {
    let (c, h, w) = set.shape();
    let m = max_shift as i64;
    let size = set.image_size();
    for img in set.pixels.chunks_mut(size) {
        let dy = rng.random_range(-m..=m) as isize;
        let dx = rng.random_range(-m..=m) as isize;
        if dx == 0 && dy == 0 {
            continue;
        }
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
                    img[ch * h * w + (y as usize) * w + x as usize] =
                        if inside { src[ch * h * w + (sy as usize) * w + sx as usize] } else { 0.0 };
                }
            }
        }
    }
}

fn restore_parameters(model: &CapsOsrModel, ckpt: &Checkpoint) -> Result<()> {
    for (name, _) in model.store().iter() {
        let stored = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        model.store().set(name, &stored.to_tensor()?)?;
    }
    let expected = model.store().len();
    let present = ckpt.tensors.keys().filter(|n| !n.starts_with(ADAM_PREFIX)).count();
    if present != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {present} parameters, the configured model has {expected}"
        )));
    }
    Ok(())
}

/// Model with the parameters of `ckpt`, for evaluation.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<CapsOsrModel> {
    let model = build_model(&ckpt.config)?;
    restore_parameters(&model, ckpt)?;
    Ok(model)
}

/// Trains from scratch for the configured number of steps.
pub fn train(config: &ExperimentConfig, known_classes: &[usize], train: &ImageSet, log: &mut RunLog) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone(), known_classes.to_vec())?;
    let total = trainer.total_steps(train.len());
    trainer.run_until(train, total, log)?;
    trainer.checkpoint()
}
