//! Controllable level generation.
//!
//! An editing agent is conditioned on target values for a set of level metrics
//! and rewarded for closing the gap between the current level and those targets.
//! The crate provides the tile domains ([`grid`]), exact metric oracles
//! ([`metrics`]), the editing environment ([`env`]), a learning-progress
//! curriculum ([`curriculum`]), a greedy oracle agent and a small convolutional
//! policy trained with a clipped surrogate objective ([`agent`]), evaluation
//! sweeps ([`eval`]) and the plumbing around them (config, checkpoints,
//! training loop and steering sessions).

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod eval;
pub mod grid;
pub mod metrics;
pub mod par;
pub mod session;
pub mod train;

pub use error::{Error, Result};
