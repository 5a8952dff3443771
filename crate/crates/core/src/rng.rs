//! Seeded random streams.
//!
//! Every random draw in a run comes from a generator keyed by
//! `(run seed, step, purpose)`, so a run is reproducible from its seed alone
//! and draws for one purpose never shift another's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StepRng = ChaCha8Rng;

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Batch = 3,
    GradientNoise = 4,
    CountNoise = 5,
    Init = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, step: u64, stream: Stream) -> StepRng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ step) ^ stream as u64);
    ChaCha8Rng::seed_from_u64(key)
}
