//! Seeded random streams. Every stochastic component takes an explicit RNG so
//! that `(config, seed)` determines every number the crate produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`; distinct `stream` ids never overlap.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TRAIN_CHANNEL: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const TEST_SET: u64 = 5;
    pub const EVAL_CHANNEL: u64 = 6;
    pub const BASELINE: u64 = 7;
}
