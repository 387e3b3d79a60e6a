//! Reconstruction path: label embedding shift, transposed-convolution decoder
//! with gated lateral connections, and the reconstruction loss.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::ops;
use crate::params::{fan_in_uniform, ParamGroup, ParamStore};
use crate::targets::label_index;

/// `z[k] + table[label]` for every capsule slot `k`. `z` is `[B, K, d]`, `table` is `[K, d]`.
pub fn embed_and_shift(z: &Tensor, labels: &[usize], table: &Tensor) -> Result<Tensor> {
    let (b, _, d) = z.dims3()?;
    let (classes, td) = table.dims2()?;
    if td != d {
        return Err(invalid!("embedding width {td} does not match capsule width {d}"));
    }
    if labels.len() != b {
        return Err(invalid!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid!("label {bad} out of range for {classes} classes"));
    }
    let rows = table.index_select(&label_index(labels)?, 0)?.unsqueeze(1)?;
    Ok(z.broadcast_add(&rows)?)
}

/// Teacher forcing: the true label while training, the prediction otherwise.
pub fn select_decoder_label(y_true: Option<usize>, y_pred: usize, training: bool) -> Result<usize> {
    if training {
        y_true.ok_or_else(|| invalid!("training requires the true label"))
    } else {
        Ok(y_pred)
    }
}

/// Batch mean of the per-sample sum of squared pixel errors.
pub fn reconstruction_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(invalid!("reconstruction {:?} vs input {:?}", x_hat.dims(), x.dims()));
    }
    let b = x.dim(0)?;
    let per_sample = (x_hat - x)?.sqr()?.reshape((b, ()))?.sum(D::Minus1)?;
    Ok(per_sample.mean(0)?)
}

/// An encoder feature map that feeds the decoder. `scale` is the downsampling
/// factor relative to the input image (1, 2 or 4).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LateralSpec {
    pub channels: usize,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    pub k: usize,
    pub d: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels at scales 4, 2 and 1.
    pub stage_channels: [usize; 3],
    pub laterals: Vec<LateralSpec>,
}

struct LateralConv {
    weight: Tensor,
    bias: Tensor,
    gain: Tensor,
    shift: Tensor,
    stage: usize,
}

/// Multiplier per lateral per sample: 0 (dropped), `1/(1-p)` (kept, training) or 1 (evaluation).
#[derive(Clone, Debug, PartialEq)]
pub struct LateralGates {
    pub multipliers: Vec<Vec<f64>>,
}

impl LateralGates {
    pub fn open(n_laterals: usize, batch: usize) -> Self {
        LateralGates {
            multipliers: vec![vec![1.0; batch]; n_laterals],
        }
    }

    /// Each (lateral, sample) connection is zeroed with probability `rate`.
    pub fn sample(n_laterals: usize, batch: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(invalid!("dropout rate {rate} outside [0, 1]"));
        }
        let kept = if rate < 1.0 { 1.0 / (1.0 - rate) } else { 0.0 };
        let multipliers = (0..n_laterals)
            .map(|_| {
                (0..batch)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { kept })
                    .collect()
            })
            .collect();
        Ok(LateralGates { multipliers })
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// `[B, C, H, W]`
    pub x_hat: Tensor,
    pub gates: LateralGates,
}

pub struct Decoder {
    layout: DecoderLayout,
    fc_weight: Tensor,
    fc_bias: Tensor,
    up: [(Tensor, Tensor); 2],
    out: (Tensor, Tensor),
    laterals: Vec<LateralConv>,
}

fn stage_of_scale(scale: usize) -> Result<usize> {
    match scale {
        4 => Ok(0),
        2 => Ok(1),
        1 => Ok(2),
        s => Err(invalid!("unsupported lateral scale {s}")),
    }
}

pub(crate) fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Per-sample normalization over `(C, H, W)` followed by a per-channel affine map.
fn normalize(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c * h * w))?;
    let mean = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
    let normed = normed.broadcast_mul(&gain.reshape((1, c, 1, 1))?)?;
    add_bias(&normed, shift)
}

impl Decoder {
    pub fn new(layout: DecoderLayout, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if layout.height % 4 != 0 || layout.width % 4 != 0 {
            return Err(invalid!(
                "decoder needs image sides divisible by 4, got {}x{}",
                layout.height,
                layout.width
            ));
        }
        let [c4, c2, c1] = layout.stage_channels;
        let (h4, w4) = (layout.height / 4, layout.width / 4);
        let latent = layout.k * layout.d;
        let g = ParamGroup::Decoder;
        let fc_n = latent * c4 * h4 * w4;
        let fc_weight = store.add("decoder.fc.weight", g, &[latent, c4 * h4 * w4], fan_in_uniform(rng, fc_n, latent))?;
        let fc_bias = store.add("decoder.fc.bias", g, &[c4 * h4 * w4], vec![0.0; c4 * h4 * w4])?;
        let mut up_layer = |name: &str, cin: usize, cout: usize, kernel: usize| -> Result<(Tensor, Tensor)> {
            let n = cin * cout * kernel * kernel;
            let w = store.add(&format!("decoder.{name}.weight"), g, &[cin, cout, kernel, kernel], fan_in_uniform(rng, n, cin * kernel * kernel))?;
            let b = store.add(&format!("decoder.{name}.bias"), g, &[cout], vec![0.0; cout])?;
            Ok((w, b))
        };
        let up0 = up_layer("up0", c4, c2, 4)?;
        let up1 = up_layer("up1", c2, c1, 4)?;
        let out = up_layer("out", c1, layout.out_channels, 3)?;
        let mut laterals = Vec::with_capacity(layout.laterals.len());
        for (i, spec) in layout.laterals.iter().enumerate() {
            let stage = stage_of_scale(spec.scale)?;
            let cout = layout.stage_channels[stage];
            let prefix = format!("decoder.lateral{i}");
            laterals.push(LateralConv {
                weight: store.add(&format!("{prefix}.weight"), g, &[cout, spec.channels, 1, 1], fan_in_uniform(rng, cout * spec.channels, spec.channels))?,
                bias: store.add(&format!("{prefix}.bias"), g, &[cout], vec![0.0; cout])?,
                gain: store.add(&format!("{prefix}.gain"), g, &[cout], vec![1.0; cout])?,
                shift: store.add(&format!("{prefix}.shift"), g, &[cout], vec![0.0; cout])?,
                stage,
            });
        }
        Ok(Decoder {
            layout,
            fc_weight,
            fc_bias,
            up: [up0, up1],
            out,
            laterals,
        })
    }

    pub fn layout(&self) -> &DecoderLayout {
        &self.layout
    }

    pub fn n_laterals(&self) -> usize {
        self.laterals.len()
    }

    /// `relu(norm(conv1x1(x)))` for lateral `index`, before gating.
    pub fn lateral_features(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let lc = self
            .laterals
            .get(index)
            .ok_or_else(|| invalid!("no lateral {index}"))?;
        let y = add_bias(&x.conv2d(&lc.weight, 0, 1, 1, 1)?, &lc.bias)?;
        Ok(normalize(&y, &lc.gain, &lc.shift)?.relu()?)
    }

    fn check_laterals(&self, laterals: &[Tensor], batch: usize) -> Result<()> {
        if laterals.len() != self.laterals.len() {
            return Err(invalid!("expected {} laterals, got {}", self.laterals.len(), laterals.len()));
        }
        for (i, (t, spec)) in laterals.iter().zip(&self.layout.laterals).enumerate() {
            let want = [batch, spec.channels, self.layout.height / spec.scale, self.layout.width / spec.scale];
            if t.dims() != want {
                return Err(invalid!("lateral {i} has shape {:?}, expected {:?}", t.dims(), want));
            }
        }
        Ok(())
    }

    fn gated_sum(&self, stage: usize, h: Tensor, laterals: &[Tensor], gates: &LateralGates) -> Result<Tensor> {
        let mut h = h;
        for (i, lc) in self.laterals.iter().enumerate() {
            if lc.stage != stage {
                continue;
            }
            let mult = &gates.multipliers[i];
            if mult.iter().all(|m| *m == 0.0) {
                continue;
            }
            let feats = self.lateral_features(i, &laterals[i])?;
            let g = Tensor::from_vec(mult.clone(), (mult.len(), 1, 1, 1), h.device())?.to_dtype(h.dtype())?;
            h = (h + feats.broadcast_mul(&g)?)?;
        }
        Ok(h)
    }

    /// Decodes shifted capsules `[B, K, d]` to `[B, C, H, W]` with values in (0, 1).
    ///
    /// In training mode each lateral is dropped per sample with probability
    /// `dropout_rate`; in evaluation mode all laterals pass unscaled.
    pub fn decode(
        &self,
        shifted: &Tensor,
        laterals: &[Tensor],
        dropout_rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Reconstruction> {
        let (b, k, d) = shifted.dims3()?;
        if k != self.layout.k || d != self.layout.d {
            return Err(invalid!("decoder expects [{}, {}] capsules, got [{k}, {d}]", self.layout.k, self.layout.d));
        }
        self.check_laterals(laterals, b)?;
        let gates = if training {
            LateralGates::sample(self.laterals.len(), b, dropout_rate, rng)?
        } else {
            LateralGates::open(self.laterals.len(), b)
        };
        let x_hat = self.decode_with_gates(shifted, laterals, &gates)?;
        Ok(Reconstruction { x_hat, gates })
    }

    pub fn decode_with_gates(&self, shifted: &Tensor, laterals: &[Tensor], gates: &LateralGates) -> Result<Tensor> {
        let (b, k, d) = shifted.dims3()?;
        let [c4, _, _] = self.layout.stage_channels;
        let (h4, w4) = (self.layout.height / 4, self.layout.width / 4);
        let flat = shifted.reshape((b, k * d))?;
        let h = flat
            .matmul(&self.fc_weight)?
            .broadcast_add(&self.fc_bias)?
            .relu()?
            .reshape((b, c4, h4, w4))?;
        let mut h = self.gated_sum(0, h, laterals, gates)?;
        for (stage, (w, bias)) in self.up.iter().enumerate() {
            h = add_bias(&h.conv_transpose2d(w, 1, 0, 2, 1)?, bias)?.relu()?;
            h = self.gated_sum(stage + 1, h, laterals, gates)?;
        }
        let (w, bias) = &self.out;
        ops::sigmoid(&add_bias(&h.conv_transpose2d(w, 1, 0, 1, 1)?, bias)?)
    }
}
