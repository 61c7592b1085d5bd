//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from [`ChaCha8Rng`] seeded
//! from an explicit 64-bit seed. Independent sub-streams (per fold, per
//! replication, per multistart run) are derived with a SplitMix64 mix of the
//! parent seed and a stream index, so results are reproducible bit-for-bit
//! within one build regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single generator family used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `stream` from `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1)))
}

/// Labelled sub-streams, so unrelated consumers of one seed never collide.
pub mod streams {
    pub const FOLDS: u64 = 1;
    pub const OUTCOME: u64 = 2;
    pub const EXPOSURE: u64 = 3;
    pub const RATIO: u64 = 4;
    pub const NUMERATOR: u64 = 5;
    pub const TILT_DRAWS: u64 = 6;
    pub const CONSTRAINT: u64 = 7;
    pub const MULTISTART: u64 = 8;
    pub const DATA: u64 = 9;
    pub const COEFFICIENTS: u64 = 10;
    pub const TRUTH: u64 = 11;
}
