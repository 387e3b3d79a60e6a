use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageSet;
use crate::error::{invalid, Result};

/// `n` images of i.i.d. uniform `[0, 1]` pixels, all labelled `label`.
pub fn synth_noise_dataset(n: usize, shape: (usize, usize, usize), label: usize, seed: u64) -> Result<ImageSet> {
    if n == 0 {
        return Err(invalid!("noise dataset needs at least one image"));
    }
    let (c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * c * h * w).map(|_| rng.random::<f32>()).collect();
    ImageSet::new(c, h, w, pixels, vec![label; n])
}

/// Pixelwise `clip(digit + noise, 0, 1)`, keeping the digit labels.
pub fn synth_mnist_noise(digits: &ImageSet, noise: &ImageSet) -> Result<ImageSet> {
    if digits.shape() != noise.shape() || digits.len() != noise.len() {
        return Err(invalid!(
            "digit set {}x{:?} and noise set {}x{:?} differ",
            digits.len(),
            digits.shape(),
            noise.len(),
            noise.shape()
        ));
    }
    let pixels = digits
        .pixels
        .iter()
        .zip(&noise.pixels)
        .map(|(a, b)| (a + b).clamp(0.0, 1.0))
        .collect();
    let (c, h, w) = digits.shape();
    ImageSet::new(c, h, w, pixels, digits.labels.clone())
}
