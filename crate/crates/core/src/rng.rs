//! Named, seedable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes drawing randomness from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Masks = 4,
    Validation = 5,
    Probe = 6,
}

/// Deterministic generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
