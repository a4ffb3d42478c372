//! Named random sub-streams derived from a single top-level seed.
//!
//! Every consumer of randomness asks for a `(stream, index)` pair, so one
//! component can be reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Datagen = 1,
    Init = 2,
    Training = 3,
    Omission = 4,
}

/// Deterministic generator for sub-stream `stream`/`index` of `seed`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ (index & 0x00ff_ffff_ffff_ffff));
    rng
}

/// Packs small integer coordinates into a sub-stream index.
pub fn index_of(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |acc, &p| acc.wrapping_mul(1_000_003).wrapping_add(p + 1))
}
