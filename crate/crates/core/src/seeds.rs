//! Deterministic seed streams.
//!
//! Every random draw in a run flows from one global seed. Sub-streams are
//! keyed by `(global seed, client, round, purpose)` so that clients can run
//! in any order and still draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Partition = 2,
    Split = 3,
    Init = 4,
    Batches = 5,
    Augment = 6,
    Stragglers = 7,
    FineTune = 8,
    Verify = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(global), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(global: u64, purpose: Purpose, parts: &[u64]) -> SimRng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(parts);
    SimRng::seed_from_u64(derive_seed(global, &all))
}
