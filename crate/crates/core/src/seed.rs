//! Counter-based seed derivation.
//!
//! A single run seed fans out into independent sub-seeds by hashing
//! `(seed, stream, index)` through SplitMix64, so each stage and each
//! examinee draws from its own reproducible stream regardless of the order
//! work is scheduled in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams so stages never share randomness by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synth = 1,
    Split = 2,
    Pretrain = 3,
    Train = 4,
    Session = 5,
    Init = 6,
    PoolSplit = 7,
    Policy = 8,
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
