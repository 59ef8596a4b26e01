//! Reproducible random streams.
//!
//! Every stochastic consumer (a simulated path, a training iteration, a
//! dataset draw) owns its own ChaCha8 stream. The stream for `(seed, key)`
//! is obtained by mixing the key components through SplitMix64 and seeding a
//! fresh generator with the result, so the draws of path `i` never depend on
//! how many paths were simulated before it or on the thread that ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream for a base seed and a hierarchical key.
pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// A seed plus a key prefix; children extend the key by one component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    seed: u64,
    key: Vec<u64>,
}

impl StreamKey {
    pub fn new(seed: u64, key: &[u64]) -> Self {
        StreamKey { seed, key: key.to_vec() }
    }

    pub fn child(&self, k: u64) -> Self {
        let mut key = self.key.clone();
        key.push(k);
        StreamKey { seed: self.seed, key }
    }

    pub fn rng(&self) -> StreamRng {
        stream(self.seed, &self.key)
    }
}

/// Domain tags so that different consumers of the same seed never collide.
pub mod tag {
    pub const PATH: u64 = 1;
    pub const BM_ITER: u64 = 2;
    pub const BAYES_ITER: u64 = 3;
    pub const DATA: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EVAL: u64 = 6;
}
