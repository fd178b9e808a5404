//! Seed derivation. A single user seed drives every random draw; each consumer
//! takes its own ChaCha8 stream of that seed so adding draws in one place never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Initial agent placement.
    Init = 0,
    /// Mini-batch selection during calibration.
    Batches = 1,
    /// Random test instances (gradient check).
    Instance = 2,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
