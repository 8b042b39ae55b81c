//! Seeded random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose seed is
//! derived from the run seed plus a key path (purpose, step, member, ...), so
//! results never depend on the order in which independent pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for substream keys.
pub mod purpose {
    pub const MODEL_NOISE: u64 = 1;
    pub const OBS_PERTURBATION: u64 = 2;
    pub const INITIAL_ENSEMBLE: u64 = 3;
    pub const PARAM_WALK: u64 = 4;
    pub const SENSOR: u64 = 5;
    pub const LOOKAHEAD: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into one 64-bit seed.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
