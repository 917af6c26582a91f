//! History compression for partially observable reinforcement learning.
//!
//! Observations are mapped into the token-embedding space of a small frozen
//! causal transformer by a fixed random projection followed by one modern
//! Hopfield retrieval (`fhopfield`). The transformer (`memnet`) runs one step
//! at a time over a memory register and its last hidden state summarizes the
//! history. Only a small observation encoder and the actor-critic heads
//! (`agent`) are trained, with PPO (`ppo`) on top of a tape-based reverse-mode
//! differentiation core (`ndiff`).

pub mod agent;
pub mod cli;
pub mod envs;
pub mod error;
pub mod fhopfield;
pub mod hopfield;
pub mod memnet;
pub mod ndiff;
pub mod ppo;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
