//! Named trainable parameters, seeded initialization and the Adam optimizer.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Capsules,
    Head,
    Targets,
    Embedding,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Capsules,
        ParamGroup::Head,
        ParamGroup::Targets,
        ParamGroup::Embedding,
        ParamGroup::Decoder,
    ];

    /// Groups that sit on the encoder side of the capsule distribution.
    pub fn is_encoder_side(self) -> bool {
        matches!(
            self,
            ParamGroup::Encoder | ParamGroup::Capsules | ParamGroup::Head
        )
    }
}

pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Registry of every trainable tensor in a model, keyed by a stable name.
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `values` (row-major, `shape`) under `name` and returns the live tensor handle.
    pub fn add(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        values: Vec<f64>,
    ) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params
            .insert(name.to_string(), Param { var, group });
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Overwrites a parameter in place; every handle returned by [`add`](Self::add) sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if p.var.shape() != value.shape() {
            return Err(invalid!(
                "shape mismatch for {name}: {:?} vs {:?}",
                p.var.shape(),
                value.shape()
            ));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }
}

/// Uniform values in `[-bound, bound)`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Fan-in scaled uniform initialization (the usual `1/sqrt(fan_in)` bound).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    uniform(rng, n, 1.0 / (fan_in.max(1) as f64).sqrt())
}

/// He-uniform initialization for layers followed by a rectifier: bound `sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    uniform(rng, n, (6.0 / fan_in.max(1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    first: Tensor,
    second: Tensor,
    steps: u64,
}

/// Adam with per-parameter step counts. Parameters without a gradient in a step are skipped.
pub struct Adam {
    settings: AdamSettings,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(settings: AdamSettings) -> Self {
        Adam {
            settings,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step_scaled(store, grads, 1.0)
    }

    /// One update with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled(&mut self, store: &ParamStore, grads: &GradStore, lr_scale: f64) -> Result<()> {
        let AdamSettings {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.settings;
        let learning_rate = learning_rate * lr_scale;
        for (name, param) in store.iter() {
            let Some(g) = grads.get(param.var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let entry = match self.moments.get_mut(name) {
                Some(m) => m,
                None => {
                    let zeros = param.var.zeros_like()?;
                    self.moments.insert(
                        name.clone(),
                        Moments {
                            first: zeros.clone(),
                            second: zeros,
                            steps: 0,
                        },
                    );
                    self.moments.get_mut(name).expect("just inserted")
                }
            };
            entry.steps += 1;
            entry.first = ((&entry.first * beta1)? + (g * (1.0 - beta1))?)?;
            entry.second = ((&entry.second * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let t = entry.steps as i32;
            let m_hat = (&entry.first / (1.0 - beta1.powi(t)))?;
            let v_hat = (&entry.second / (1.0 - beta2.powi(t)))?;
            let update = (m_hat.div(&(v_hat.sqrt()? + eps)?)? * learning_rate)?;
            param.var.set(&param.var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }

    /// Exports the optimizer state as named tensors plus per-parameter step counts.
    pub fn state(&self) -> (Vec<(String, Tensor)>, BTreeMap<String, u64>) {
        let mut tensors = Vec::with_capacity(self.moments.len() * 2);
        let mut steps = BTreeMap::new();
        for (name, m) in &self.moments {
            tensors.push((format!("adam.m.{name}"), m.first.clone()));
            tensors.push((format!("adam.v.{name}"), m.second.clone()));
            steps.insert(name.clone(), m.steps);
        }
        (tensors, steps)
    }

    pub fn restore(
        settings: AdamSettings,
        steps: &BTreeMap<String, u64>,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, &count) in steps {
            let first = tensors
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| invalid!("missing first moment for {name}"))?
                .clone();
            let second = tensors
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| invalid!("missing second moment for {name}"))?
                .clone();
            moments.insert(
                name.clone(),
                Moments {
                    first,
                    second,
                    steps: count,
                },
            );
        }
        Ok(Adam { settings, moments })
    }
}
