//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 stream keyed by the run
//! seed plus a fixed stream id, so adding a new consumer never perturbs the
//! draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_TARGETS: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_DROPOUT: u64 = 4;
pub const STREAM_CLUSTER: u64 = 5;
pub const STREAM_SYNTH: u64 = 6;

/// Deterministic stream for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for a sub-task indexed by `index` (e.g. one batch of one epoch).
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = self::stream(seed, stream);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
