//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from the same seed,
//! so adding draws for one purpose never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Purpose tags used to select independent streams from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    BayesOpt = 3,
    Simulation = 4,
    Split = 5,
    Minibatch = 6,
    TestData = 7,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Like [`stream`] but further keyed by a sub-index (e.g. a β grid position).
pub fn substream(seed: u64, purpose: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(purpose as u64);
    rng
}
