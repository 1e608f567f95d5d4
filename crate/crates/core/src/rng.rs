//! Per-purpose random streams derived from one root seed.
//!
//! Every consumer gets a ChaCha8 generator keyed by the root seed, with the
//! stream id `(purpose << 48) | index`. Training uses the global iteration as
//! the index, so a resumed run draws exactly what an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    /// Per-iteration training draws (data batch, noise, timesteps).
    Train = 2,
    /// Initial noise for sampling.
    SampleNoise = 3,
    /// SDE Wiener increments; indexed by shard.
    SdeNoise = 4,
    /// Data/noise pairs for Slow Flow envelopes.
    SlowFlow = 5,
    GradCheck = 6,
    /// Ground-truth draws for evaluation.
    Eval = 7,
}

pub const INDEX_MASK: u64 = (1 << 48) - 1;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & INDEX_MASK));
    rng
}
