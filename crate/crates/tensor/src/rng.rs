//! Named, counter-addressed random streams.
//!
//! Every stochastic draw is taken from `stream(name, index)`: a ChaCha8
//! generator keyed by the root seed, with the ChaCha stream id derived from
//! `name` and the block counter positioned by `index`. Draws therefore depend
//! only on `(seed, name, index)`, never on how many other draws happened first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// FNV-1a of the stream name.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(name));
        // 2^32 words per index.
        rng.set_word_pos((index as u128) << 32);
        rng
    }

    /// A child family with an independent root seed.
    pub fn split(&self, label: &str) -> Self {
        Self {
            seed: self.seed ^ stream_id(label).rotate_left(17),
        }
    }
}

/// `[rows, cols]` standard normal draws.
pub fn normal_tensor<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}
