//! Seeded random sources. Every stochastic operation takes one of these
//! explicitly; nothing reads global entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::Image;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream; used where a fixed decomposition
/// (per pixel, per view) must not depend on consumption order.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_image(rng: &mut impl Rng, width: usize, height: usize, channels: usize) -> Image {
    let data = (0..width * height * channels).map(|_| normal(rng)).collect();
    Image::from_vec(width, height, channels, data).expect("sizes agree")
}
