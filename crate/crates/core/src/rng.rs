//! Seeded random streams.
//!
//! Every stochastic decision draws from a ChaCha8 stream whose seed is a
//! SHA-256 digest of `(global seed, purpose, keys…)`, so per-sample draws do
//! not depend on batch composition or processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Purpose tags for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Corpus,
    Utterance,
    NoiseBank,
    Noise,
    MaskAudio,
    MaskVideo,
    Dropout,
    Shuffle,
    Init,
    EvalNoise,
    KMeans,
}

impl Stream {
    fn tag(self) -> &'static [u8] {
        match self {
            Stream::Corpus => b"corpus",
            Stream::Utterance => b"utterance",
            Stream::NoiseBank => b"noise-bank",
            Stream::Noise => b"noise",
            Stream::MaskAudio => b"mask-audio",
            Stream::MaskVideo => b"mask-video",
            Stream::Dropout => b"modality-dropout",
            Stream::Shuffle => b"shuffle",
            Stream::Init => b"init",
            Stream::EvalNoise => b"eval-noise",
            Stream::KMeans => b"kmeans",
        }
    }
}

/// Derives an independent stream from a seed, a purpose and numeric keys.
pub fn derive(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    derive_named(seed, stream, "", keys)
}

/// As [`derive`], additionally keyed by a string such as an utterance id.
pub fn derive_named(seed: u64, stream: Stream, name: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.tag());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}
