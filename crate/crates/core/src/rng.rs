//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Augment = 3,
    Nmf = 4,
    Synth = 5,
}

/// Independent generator for `(seed, stream, index)`. The index lets a
/// consumer start a fresh sequence per epoch.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
