//! Stream-addressed randomness.
//!
//! Every random quantity in the crate is drawn from an `RngStream`, a pure
//! value naming a (seed, stream) coordinate. Two draws from the same
//! coordinates produce the same sequence regardless of thread schedule, and
//! derived streams let parallel work own independent coordinates.

use rand::distributions::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for tagged subtasks (epoch, view, test point, ...).
    /// Same seed, mixed stream id; deterministic in (self, tag).
    pub fn derive(&self, tag: u64) -> Self {
        let mixed = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        RngStream {
            seed: self.seed,
            stream_id: mixed,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// `n` i.i.d. standard normal draws, always starting from the stream origin.
    pub fn std_normal(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// `n` i.i.d. uniform draws on [lo, hi).
    pub fn uniform(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = self.rng();
        let dist = Uniform::new(lo, hi);
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Fisher-Yates permutation of 0..n.
    pub fn shuffled_indices(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng());
        idx
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
