//! Seed derivation and Gaussian draws. Every stochastic choice in training
//! and sampling comes from a ChaCha stream keyed by a derived seed, so
//! results depend only on the inputs, never on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numeric::{Matrix, Real};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of indices into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc.rotate_left(23) ^ splitmix(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

pub fn gaussian_matrix<F: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<F> {
    Matrix::from_fn(rows, cols, |_, _| F::of(rng.sample::<f64, _>(StandardNormal)))
}
