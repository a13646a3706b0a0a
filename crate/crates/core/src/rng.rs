//! Keyed, splittable random streams.
//!
//! A stream is a `(seed, path)` pair. Children are derived by hashing a tag
//! into the path, so any consumer can be handed its own stream without
//! disturbing the draws seen by anyone else. Two equal streams always yield
//! identical draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags for child streams.
pub mod tags {
    pub const STEP: u64 = 1;
    pub const CORRUPT: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const GATE: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const WORLD: u64 = 9;
    pub const DATA: u64 = 10;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            path: splitmix64(self.path ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }

    /// Shorthand for nested children, e.g. `stream.at(&[iter, item])`.
    pub fn at(&self, tags: &[u64]) -> Self {
        tags.iter().fold(*self, |s, &t| s.child(t))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path);
        rng
    }

    /// Single uniform draw in `[0, 1)` from a fresh generator on this stream.
    pub fn uniform(&self) -> f64 {
        self.rng().gen::<f64>()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inverse-CDF draw from an unnormalised-safe probability vector.
///
/// Entries with zero mass are never returned.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
