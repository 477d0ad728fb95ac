//! Seeded latent sampling for the reveal paths.
//!
//! The forward passes emit image-agnostic residual variables that are
//! discarded after concealment; revealing substitutes an i.i.d. standard
//! normal draw (or zeros), deterministic given the seed.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{fc, Scalar};

/// How reveal-time latents are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Normal,
    Zeros,
}

/// Deterministic i.i.d. standard normal tensor.
pub fn sample_normal<F: Scalar>(dims: (usize, usize, usize, usize), seed: u64) -> Array4<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(dims, || {
        let v: f64 = StandardNormal.sample(&mut rng);
        fc(v)
    })
}

pub fn sample_latent<F: Scalar>(
    dims: (usize, usize, usize, usize),
    seed: u64,
    mode: LatentMode,
) -> Array4<F> {
    match mode {
        LatentMode::Normal => sample_normal(dims, seed),
        LatentMode::Zeros => Array4::zeros(dims),
    }
}
