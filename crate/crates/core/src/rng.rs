//! Seeded random streams.
//!
//! One run seed feeds a ChaCha8 generator per stream id, so a component's
//! draws never depend on how many numbers another component consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Augment = 3,
    Scene = 4,
    Probe = 5,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    stream_with(seed, stream as u64)
}

pub fn stream_with(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// SplitMix64 finalizer, used for stateless lattice noise.
pub fn hash64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
