//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded by a
//! 64-bit value. Child seeds are derived from a parent seed, a stream tag and
//! an index with a SplitMix64-style finalizer, so per-sample and per-trial
//! streams do not depend on the order in which they are generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep seeds drawn for different purposes apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Signal = 0x5349_474e,
    Noise = 0x4e4f_4953,
    Resample = 0x5245_5353,
    Trial = 0x5452_4941,
    GroundTruth = 0x5452_5554,
    Training = 0x5452_4e47,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for item `index` of `stream` under `parent`.
pub fn derive(parent: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(parent ^ mix(stream as u64)).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
