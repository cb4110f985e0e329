//! Deterministic, splittable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A counter-based random stream keyed by `(seed, stream)`.
///
/// The same key yields the same sample sequence on every run, platform and
/// thread schedule. Parallel consumers never share a stream; they derive
/// disjoint `stream` indices instead (see [`montecarlo`](crate::montecarlo)
/// for the replicate layout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Same seed, different stream index.
    pub fn with_stream(self, stream: u64) -> Self {
        Self { stream, ..self }
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}
