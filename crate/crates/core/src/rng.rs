//! Indexed random streams.
//!
//! Every consumer of randomness derives its own generator from the global
//! seed plus a stream tag and indices, so results do not depend on the order
//! (or thread) in which work items are processed.

use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same seed independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    EpochOrder = 2,
    SentenceMask = 3,
    LabelMask = 4,
    Episode = 5,
    Synth = 6,
    Metrics = 7,
    Check = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream, indices...)`.
pub fn derive(seed: u64, stream: Stream, indices: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// `rows x cols` tensor with i.i.d. `N(0, std^2)` entries.
pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite non-negative std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}
