//! Deterministic RNG derivation.
//!
//! A single root seed fans out into independent ChaCha streams, one per
//! consumer, so changing e.g. the sampler cannot perturb environment noise.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable identifiers for every RNG consumer in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumer {
    /// Environment transition noise.
    Env = 1,
    /// Exploration (epsilon-greedy coin flips and random actions).
    Action = 2,
    /// Mini-batch and large-batch index draws.
    Sampler = 3,
    /// Network weight initialization.
    Init = 4,
    /// Evaluation rollouts and ad-hoc experiment draws.
    Eval = 5,
}

/// Derive the RNG for one consumer from the root seed. Streams with
/// different consumers never overlap.
pub fn rng_for(root_seed: u64, consumer: Consumer) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(consumer as u64);
    rng
}
