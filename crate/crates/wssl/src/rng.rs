//! Deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream keyed
//! by `(base seed, purpose, index)`. Streams are independent, so per-sample
//! pipelines can run in any order (or in parallel) and still reproduce the
//! serial results bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespaces for derived RNG streams.
#[derive(Debug, Clone, Copy)]
pub enum StreamKind {
    ModelInit = 0,
    Shuffle = 1,
    Augment = 2,
    MaskGen = 3,
    HeldoutMask = 4,
    TransplantInit = 5,
    SweepCell = 6,
    Synth = 7,
}

/// RNG for `(seed, kind, index)`; `index` must fit in 56 bits.
pub fn stream_rng(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << 56));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 56) | index);
    rng
}
