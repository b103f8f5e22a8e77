//! Named random streams derived from one scenario seed.
//!
//! Each concern draws from its own ChaCha stream, so e.g. enabling DP noise
//! never shifts which clients get sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sampling = 1,
    Noise = 2,
    Data = 3,
    Init = 4,
    Roles = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
