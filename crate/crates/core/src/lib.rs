//! Adaptive round-based multi-task self-refinement for robot failure
//! detection and reasoning.
//!
//! The crate is organised bottom-up:
//!
//! * [`datagen`] synthesises the failure benchmark and reads/writes its
//!   line-delimited dataset format.
//! * [`diffcore`] is a small reverse-mode differentiation engine with the
//!   handful of operations the model needs, plus AdamW and checkpoints.
//! * [`model`] is the policy: frame encoder, a classification head for
//!   detection and an autoregressive decoder for reasoning.
//! * [`refine`] holds the refinement MDP, training rollouts and the
//!   entropy-guided multi-trajectory inference loop.
//! * [`train`] runs offline imitation (warm-up and expert-conditioned
//!   stages) followed by online refinement.
//! * [`evalx`] computes metrics, runs evaluation and the ablation grids.
//! * [`config`] is the single run configuration consumed by the CLI.

pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod evalx;
pub mod model;
pub mod refine;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
