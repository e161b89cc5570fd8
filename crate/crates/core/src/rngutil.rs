//! Deterministic RNG plumbing.
//!
//! Every stochastic routine in this crate is seeded explicitly and derives
//! independent sub-streams for its internal units of work (permutation
//! replicates, MCMC chains, cross-validation folds). Sub-streams come from
//! ChaCha's stream parameter, so replicate `k` draws the same numbers no
//! matter how many replicates run, in what order, or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used throughout the crate.
pub type Rng = ChaCha12Rng;

/// RNG for sub-stream `stream` of the generator identified by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
