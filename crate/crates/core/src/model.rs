//! The full network: convolutional encoder, capsule layer with routing,
//! probabilistic head, target bank, label embedding and decoder.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::{
    dynamic_routing, pose_transform, ClassCapsules, PoseWeights, PrimaryCapsules, RoutingMode,
    RoutingNormalization, RoutingState,
};
use crate::decoder::{add_bias, embed_and_shift, Decoder, DecoderLayout, LateralSpec, Reconstruction};
use crate::error::{invalid, Result};
use crate::loss::{self, LossMode, LossValue};
use crate::ops;
use crate::params::{fan_in_uniform, he_uniform, ParamGroup, ParamStore};
use crate::targets::{TargetBank, TargetMode};
use crate::variational::{self, argmin, probabilistic_head, CapsuleDistribution, HeadParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// Two stride-1/stride-2 convolutions, sized for desk-scale runs.
    #[default]
    TinyConv,
    /// Stem plus three stages of three residual blocks.
    ResidualSmall,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Capsules,
    /// Flatten the encoder output and map it affinely to the `[K, f2]` layout; no routing.
    Affine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    #[default]
    Standard,
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of known classes.
    pub k: usize,
    /// Latent width per capsule.
    pub d: usize,
    /// Primary capsule size.
    pub f1: usize,
    /// Class capsule size.
    pub f2: usize,
    /// Primary capsule maps per grid position.
    pub primary_maps: usize,
    pub encoder: EncoderPreset,
    pub head: HeadKind,
    pub routing_iterations: usize,
    pub routing: RoutingKind,
    pub routing_normalization: RoutingNormalization,
    pub gate_bias_init: f64,
    pub target_mode: TargetMode,
    pub freeze_target_variance: bool,
    pub lateral_dropout: f64,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 6,
            d: 16,
            f1: 8,
            f2: 16,
            primary_maps: 8,
            encoder: EncoderPreset::TinyConv,
            head: HeadKind::Capsules,
            routing_iterations: 3,
            routing: RoutingKind::Standard,
            routing_normalization: RoutingNormalization::OverOutputs,
            gate_bias_init: 0.0,
            target_mode: TargetMode::Learnable,
            freeze_target_variance: false,
            lateral_dropout: 0.5,
            in_channels: 1,
            height: 28,
            width: 28,
        }
    }
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        (cin, cout, kernel): (usize, usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            ParamGroup::Encoder,
            &[cout, cin, kernel, kernel],
            he_uniform(rng, cout * fan_in, fan_in),
        )?;
        let bias = store.add(&format!("{name}.bias"), ParamGroup::Encoder, &[cout], vec![0.0; cout])?;
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_bias(&x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?, &self.bias)
    }
}

struct ResidualBlock {
    first: Conv,
    second: Conv,
    projection: Option<Conv>,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.first.forward(x)?.relu()?;
        let h = self.second.forward(&h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

enum Backbone {
    Tiny { conv1: Conv, conv2: Conv },
    Residual { stem: Conv, stages: Vec<Vec<ResidualBlock>> },
}

struct Encoder {
    backbone: Backbone,
    primary: Conv,
}

impl Encoder {
    /// Returns the final feature map at scale 4 and the lateral feature maps.
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(Self, Vec<LateralSpec>, [usize; 3])> {
        let out = cfg.primary_maps * cfg.f1;
        match cfg.encoder {
            EncoderPreset::TinyConv => {
                let conv1 = Conv::new(store, rng, "encoder.conv1", (cfg.in_channels, 16, 3), 1)?;
                let conv2 = Conv::new(store, rng, "encoder.conv2", (16, 32, 3), 2)?;
                let primary = Conv::new(store, rng, "encoder.primary", (32, out, 3), 2)?;
                let laterals = vec![
                    LateralSpec { channels: 16, scale: 1 },
                    LateralSpec { channels: 32, scale: 2 },
                ];
                Ok((
                    Encoder {
                        backbone: Backbone::Tiny { conv1, conv2 },
                        primary,
                    },
                    laterals,
                    [32, 32, 16],
                ))
            }
            EncoderPreset::ResidualSmall => {
                let stem = Conv::new(store, rng, "encoder.stem", (cfg.in_channels, 16, 3), 1)?;
                let mut stages = Vec::new();
                let mut cin = 16;
                for (s, (cout, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
                    let mut blocks = Vec::new();
                    for b in 0..3 {
                        let stride = if b == 0 { stride } else { 1 };
                        let name = format!("encoder.stage{s}.block{b}");
                        let first = Conv::new(store, rng, &format!("{name}.conv1"), (cin, cout, 3), stride)?;
                        let second = Conv::new(store, rng, &format!("{name}.conv2"), (cout, cout, 3), 1)?;
                        let projection = if stride != 1 || cin != cout {
                            Some(Conv::new(store, rng, &format!("{name}.proj"), (cin, cout, 1), stride)?)
                        } else {
                            None
                        };
                        blocks.push(ResidualBlock {
                            first,
                            second,
                            projection,
                        });
                        cin = cout;
                    }
                    stages.push(blocks);
                }
                let primary = Conv::new(store, rng, "encoder.primary", (64, out, 3), 1)?;
                let laterals = vec![
                    LateralSpec { channels: 16, scale: 1 },
                    LateralSpec { channels: 16, scale: 1 },
                    LateralSpec { channels: 32, scale: 2 },
                    LateralSpec { channels: 64, scale: 4 },
                ];
                Ok((
                    Encoder {
                        backbone: Backbone::Residual { stem, stages },
                        primary,
                    },
                    laterals,
                    [64, 32, 16],
                ))
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (top, laterals) = match &self.backbone {
            Backbone::Tiny { conv1, conv2 } => {
                let x1 = conv1.forward(x)?.relu()?;
                let x2 = conv2.forward(&x1)?.relu()?;
                (x2.clone(), vec![x1, x2])
            }
            Backbone::Residual { stem, stages } => {
                let mut h = stem.forward(x)?.relu()?;
                let mut laterals = vec![h.clone()];
                for stage in stages {
                    for block in stage {
                        h = block.forward(&h)?;
                    }
                    laterals.push(h.clone());
                }
                (h, laterals)
            }
        };
        Ok((self.primary.forward(&top)?, laterals))
    }
}

enum CapsuleLayer {
    Routing { pose: PoseWeights, gate_bias: Option<Tensor> },
    Affine { weight: Tensor, bias: Tensor },
}

/// Everything the encoder side produces for a batch.
pub struct Encoded {
    pub dist: CapsuleDistribution,
    pub laterals: Vec<Tensor>,
    pub routing: Option<RoutingState>,
}

pub struct CapsOsrModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    capsules: CapsuleLayer,
    head: HeadParams,
    bank: TargetBank,
    embedding: Tensor,
    decoder: Decoder,
}

impl CapsOsrModel {
    /// Builds a model with seeded initial parameters; `margin` is used for every class.
    pub fn new(config: ModelConfig, margin: f64, dtype: DType, seed: u64) -> Result<Self> {
        let cfg = &config;
        if cfg.k < 2 || cfg.d == 0 || cfg.f1 == 0 || cfg.f2 == 0 || cfg.primary_maps == 0 {
            return Err(invalid!("model sizes must be positive with at least two classes"));
        }
        if cfg.height % 4 != 0 || cfg.width % 4 != 0 {
            return Err(invalid!("input sides must be divisible by 4, got {}x{}", cfg.height, cfg.width));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let (encoder, laterals, stage_channels) = Encoder::new(cfg, &mut store, &mut rng)?;
        let (gh, gw) = (cfg.height / 4, cfg.width / 4);
        let n_primary = cfg.primary_maps * gh * gw;
        let capsules = match cfg.head {
            HeadKind::Capsules => {
                let n = n_primary * cfg.k * cfg.f2 * cfg.f1;
                let weights = store.add(
                    "capsules.pose",
                    ParamGroup::Capsules,
                    &[n_primary, cfg.k, cfg.f2, cfg.f1],
                    fan_in_uniform(&mut rng, n, cfg.f1),
                )?;
                let gate_bias = match cfg.routing {
                    RoutingKind::Standard => None,
                    RoutingKind::Gated => Some(store.add(
                        "capsules.gate_bias",
                        ParamGroup::Capsules,
                        &[1],
                        vec![cfg.gate_bias_init],
                    )?),
                };
                CapsuleLayer::Routing {
                    pose: PoseWeights { weights },
                    gate_bias,
                }
            }
            HeadKind::Affine => {
                let fan_in = n_primary * cfg.f1;
                let out = cfg.k * cfg.f2;
                CapsuleLayer::Affine {
                    weight: store.add(
                        "capsules.affine.weight",
                        ParamGroup::Capsules,
                        &[fan_in, out],
                        fan_in_uniform(&mut rng, fan_in * out, fan_in),
                    )?,
                    bias: store.add("capsules.affine.bias", ParamGroup::Capsules, &[out], vec![0.0; out])?,
                }
            }
        };
        let (f2, d) = (cfg.f2, cfg.d);
        let head = HeadParams {
            mu_weight: store.add("head.mu.weight", ParamGroup::Head, &[f2, d], fan_in_uniform(&mut rng, f2 * d, f2))?,
            mu_bias: store.add("head.mu.bias", ParamGroup::Head, &[d], vec![0.0; d])?,
            var_weight: store.add("head.var.weight", ParamGroup::Head, &[f2, d], fan_in_uniform(&mut rng, f2 * d, f2))?,
            var_bias: store.add("head.var.bias", ParamGroup::Head, &[d], vec![0.0; d])?,
        };
        let bank = TargetBank::init(
            cfg.k,
            d,
            cfg.target_mode,
            vec![margin; cfg.k],
            cfg.freeze_target_variance,
            &mut store,
        )?;
        let embedding = store.add(
            "embedding.table",
            ParamGroup::Embedding,
            &[cfg.k, d],
            fan_in_uniform(&mut rng, cfg.k * d, d),
        )?;
        let decoder = Decoder::new(
            DecoderLayout {
                k: cfg.k,
                d,
                out_channels: cfg.in_channels,
                height: cfg.height,
                width: cfg.width,
                stage_channels,
                laterals,
            },
            &mut store,
            &mut rng,
        )?;
        Ok(CapsOsrModel {
            config,
            store,
            encoder,
            capsules,
            head,
            bank,
            embedding,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn bank(&self) -> &TargetBank {
        &self.bank
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Converts `[n, c·h·w]` pixels into a `[n, c, h, w]` input tensor.
    pub fn input_tensor(&self, pixels: &[f32], n: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let t = Tensor::from_slice(pixels, (n, cfg.in_channels, cfg.height, cfg.width), self.store.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        self.encode_inner(x, None)
    }

    /// Encodes with routing coefficients `[B, n, K]` supplied instead of
    /// computed, so they stay fixed while parameters are perturbed in a
    /// finite-difference check. The affine head ignores them.
    pub fn encode_with_coefficients(&self, x: &Tensor, coefficients: &Tensor) -> Result<Encoded> {
        self.encode_inner(x, Some(coefficients))
    }

    fn encode_inner(&self, x: &Tensor, fixed: Option<&Tensor>) -> Result<Encoded> {
        let (features, laterals) = self.encoder.forward(x)?;
        let cfg = &self.config;
        let (class_caps, routing) = match &self.capsules {
            CapsuleLayer::Routing { pose, gate_bias } => {
                let primary = PrimaryCapsules::from_feature_map(&features, cfg.f1)?;
                let predictions = pose_transform(&primary, pose)?;
                let mode = match gate_bias {
                    Some(g) => RoutingMode::Gated { gate_bias: g.clone() },
                    None => RoutingMode::Standard,
                };
                if let Some(c) = fixed {
                    let s = c.unsqueeze(3)?.broadcast_mul(&predictions)?.sum(1)?;
                    (ClassCapsules { capsules: ops::squash(&s)? }, None)
                } else {
                    let (caps, state) =
                        dynamic_routing(&predictions, cfg.routing_iterations, &mode, cfg.routing_normalization)?;
                    (caps, Some(state))
                }
            }
            CapsuleLayer::Affine { weight, bias } => {
                let b = features.dim(0)?;
                let flat = features.reshape((b, ()))?;
                let caps = flat.matmul(weight)?.broadcast_add(bias)?.reshape((b, cfg.k, cfg.f2))?;
                (ClassCapsules { capsules: caps }, None)
            }
        };
        let dist = probabilistic_head(&class_caps, &self.head)?;
        Ok(Encoded {
            dist,
            laterals,
            routing,
        })
    }

    /// `[B, K]` class distances: capsule-to-target KL, or the per-capsule KL to
    /// `N(0, 1)` for the legacy objective.
    pub fn class_distances(&self, dist: &CapsuleDistribution, mode: LossMode) -> Result<Tensor> {
        match mode {
            LossMode::Cvae | LossMode::SoftmaxBaseline => self.bank.distances(dist),
            LossMode::LegacyMargin => {
                let zeros = dist.mu.zeros_like()?;
                variational::kl_diag_gauss(&dist.mu, &dist.var, &zeros, &zeros.ones_like()?)
            }
        }
    }

    /// Decodes `latent` `[B, K, d]` conditioned on `labels`.
    pub fn reconstruct(
        &self,
        latent: &Tensor,
        labels: &[usize],
        laterals: &[Tensor],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Reconstruction> {
        let shifted = embed_and_shift(latent, labels, &self.embedding)?;
        self.decoder
            .decode(&shifted, laterals, self.config.lateral_dropout, training, rng)
    }

    /// Training objective on a batch: sample `z`, decode with the true labels, assemble the loss.
    pub fn training_loss(&self, x: &Tensor, labels: &[usize], settings: &LossSettings, rng: &mut ChaCha8Rng) -> Result<LossValue> {
        let enc = self.encode(x)?;
        let sample = variational::reparameterize(&enc.dist, rng)?;
        let rec = self.reconstruct(&sample.z, labels, &enc.laterals, true, rng)?;
        match settings.mode {
            LossMode::Cvae => loss::total_loss_cvae(&enc.dist, labels, &self.bank, &rec.x_hat, x, settings.alpha, settings.beta),
            LossMode::LegacyMargin => {
                loss::total_loss_legacy(&enc.dist, labels, settings.beta_legacy, settings.lambda, &rec.x_hat, x)
            }
            LossMode::SoftmaxBaseline => {
                let dist = self.bank.distances(&enc.dist)?;
                loss::softmax_baseline_loss(&dist, labels, settings.gamma, settings.beta, &rec.x_hat, x)
            }
        }
    }

    /// Deterministic evaluation pass: class distances and flattened means.
    pub fn infer(&self, x: &Tensor, mode: LossMode) -> Result<Inference> {
        let enc = self.encode(x)?;
        let dist = self.class_distances(&enc.dist, mode)?;
        let (b, k) = dist.dims2()?;
        let flat = ops::to_vec_f64(&dist)?;
        let distances: Vec<Vec<f64>> = flat.chunks(k).map(<[f64]>::to_vec).collect();
        let latent = ops::to_vec_f64(&enc.dist.mu)?;
        let width = latent.len() / b.max(1);
        Ok(Inference {
            predictions: distances.iter().map(|d| argmin(d)).collect(),
            latents: latent.chunks(width.max(1)).map(<[f64]>::to_vec).collect(),
            distances,
        })
    }
}

/// Per-sample outputs of [`CapsOsrModel::infer`].
#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub distances: Vec<Vec<f64>>,
    /// Flattened capsule means `[K·d]`.
    pub latents: Vec<Vec<f64>>,
    /// Closed-set label by smallest distance.
    pub predictions: Vec<usize>,
}

impl Inference {
    pub fn extend(&mut self, other: Inference) {
        self.distances.extend(other.distances);
        self.latents.extend(other.latents);
        self.predictions.extend(other.predictions);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    /// Margin `m_k`, shared by every class.
    pub margin: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta_legacy: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            mode: LossMode::Cvae,
            alpha: 1.0,
            beta: 0.05,
            margin: 10.0,
            gamma: 1.0,
            lambda: 0.5,
            beta_legacy: 0.0005,
        }
    }
}
