//! Seeded random streams.
//!
//! Every stochastic step draws from its own stream derived from the
//! experiment seed plus a tuple of tags (domain, epoch, submodel, ...), so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod domain {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const LOCAL: u64 = 3;
    pub const PHASE2: u64 = 4;
    pub const SHADOW_SPLIT: u64 = 5;
    pub const SHADOW_TRAIN: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const DATA: u64 = 8;
    pub const ORACLE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a base seed and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tags))
}

/// Stable hash of a short name, for per-attack streams.
pub fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
