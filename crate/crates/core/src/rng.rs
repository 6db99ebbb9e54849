//! Seeded random streams. Every stochastic step draws from its own ChaCha stream
//! so that results depend only on `(seed, tag)` and never on call interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream tags used across the crate.
pub mod tags {
    pub const CHIP_PARAMS: u64 = 1;
    pub const SWEEP_NOISE: u64 = 2;
    pub const TRAIN_POOL: u64 = 3;
    pub const TEST_SET: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const AM_RESTARTS: u64 = 6;
    pub const NET_INIT: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const SUBSET: u64 = 9;
    pub const GRADCHECK: u64 = 10;
    pub const RIDGE_FOLDS: u64 = 11;
}

/// Child seed for a position (run, member, ...) under `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    use rand::RngCore;
    path.iter().fold(seed, |s, &p| stream(s, 0x9e37_79b9_7f4a_7c15 ^ p).next_u64())
}
