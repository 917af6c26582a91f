//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitives eagerly as they are applied; [`Tape::backward`]
//! replays the record in reverse. Models register their parameters on a fresh
//! tape for every forward pass (see [`Tape::bind`]), which keeps parameter
//! snapshots as plain immutable values between updates.

mod array;
pub mod checkpoint;
mod optim;
mod tape;

pub use array::Array;
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamWConfig, OptimizerState};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Bound, Tape, Var};

use std::collections::BTreeMap;

use crate::rng::Rng;

/// Named parameter set, ordered by name so that iteration and checkpoints are
/// deterministic.
pub type Params = BTreeMap<String, Array>;

/// Gradients keyed like [`Params`].
pub type Grads = BTreeMap<String, Array>;

/// Dense-layer weight `[fan_in, fan_out]` from uniform(+-1/sqrt(fan_in)).
pub fn init_dense(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Array::from_parts(vec![fan_in, fan_out], data)
}

/// Bias vector `[fan_out]` from uniform(+-1/sqrt(fan_in)).
pub fn init_bias(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
    Array::from_parts(vec![fan_out], data)
}

/// Embedding table `[rows, dim]` from N(0, 0.02^2).
pub fn init_embedding(rng: &mut Rng, rows: usize, dim: usize) -> Array {
    let data = (0..rows * dim).map(|_| rng.gaussian(0.0, 0.02)).collect();
    Array::from_parts(vec![rows, dim], data)
}

/// SHA-256 over parameter names, shapes and raw little-endian values.
pub fn params_digest(params: &Params) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, array) in params {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for &d in array.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in array.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}
