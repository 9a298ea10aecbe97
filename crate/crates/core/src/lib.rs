//! Concept bottleneck models (CBMs) under noisy concept and target supervision.
//!
//! The crate is a small laboratory: a synthetic benchmark with class-level
//! concept prototypes, a two-layer linear concept predictor feeding a linear
//! target predictor, SGD / SAM / J-SAM training, label-noise injection,
//! test-time concept intervention policies, and analysis routines
//! (susceptible sets, entropy-based uncertainty, rank-consistency
//! simulations, and a numerical check of the J-SAM regularization
//! decomposition).

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod intervene;
pub mod model;
pub mod optim;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for an independent sub-stream of `seed` (per trial, per sample, ...).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
