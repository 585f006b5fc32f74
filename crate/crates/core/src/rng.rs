//! Seed derivation. Every random stream in a run is keyed by the master
//! seed plus a path of integers, so no stream depends on another's usage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, p| splitmix(acc ^ splitmix(*p)))
}

pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

/// Stream purposes, used as the first path element.
pub mod purpose {
    pub const PROTOTYPES: u64 = 1;
    pub const TASK: u64 = 2;
    pub const SHARED_INIT: u64 = 3;
    pub const AGENT_INIT: u64 = 4;
    pub const AGENT_TRAIN: u64 = 5;
    pub const TOPOLOGY: u64 = 6;
    pub const SHARING: u64 = 7;
    pub const DATASET: u64 = 8;
}
