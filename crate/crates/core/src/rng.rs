//! Seeded random streams. Every stochastic input flows from a named `u64` seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Recorded in run manifests so a run can be reproduced on the same build.
pub const GAUSSIAN_ALGORITHM: &str =
    "ChaCha8Rng::seed_from_u64 (rand_chacha 0.9) + StandardNormal ziggurat (rand_distr 0.5)";

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
