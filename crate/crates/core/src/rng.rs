//! Deterministic RNG streams: one master seed is split into named
//! substreams (initialization, batch shuffling, Monte-Carlo sampling, ...)
//! so every run is exactly reproducible and resumable mid-stream.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Named substreams of the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    McSampling,
    ValSampling,
    Generator,
    Prediction,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1,
            Stream::Shuffle => 0x2,
            Stream::McSampling => 0x3,
            Stream::ValSampling => 0x4,
            Stream::Generator => 0x5,
            Stream::Prediction => 0x6,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream.tag().wrapping_mul(0xA24BAED4963EE407));
    splitmix64(h ^ index)
}

/// RNG positioned at the start of substream `(stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, stream, index))
}
