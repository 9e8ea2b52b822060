//! Deterministic stream derivation.
//!
//! Every source of randomness in a run is a named stream derived from the
//! master seed, so disabling one consumer (a pre-training task, a dropout
//! pass) never shifts the draws seen by another, and resuming at an epoch
//! boundary only needs the epoch index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the determinism contract: changing
/// them changes every run's randomness.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TASK_CIP: u64 = 3;
    pub const TASK_PSS: u64 = 4;
    pub const TASK_IAP: u64 = 5;
    pub const TASK_FAP: u64 = 6;
    pub const TASK_NIP: u64 = 7;
    pub const DROPOUT_MAIN: u64 = 8;
    pub const DROPOUT_PAIRED: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const GEN: u64 = 11;
}

/// Training stages, used as a derivation component.
pub mod stage {
    pub const PRETRAIN: u64 = 1;
    pub const FINETUNE: u64 = 2;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives a generator from the master seed and a tuple of stream ids.
pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &id in ids {
        s = splitmix64(s ^ id);
    }
    ChaCha8Rng::seed_from_u64(s)
}
