//! Adaptive TD(λ) laboratory for cooperative multi-agent reinforcement learning.
//!
//! Per-transition λ values come from a density-ratio discriminator trained to
//! tell a small recent-experience buffer apart from a large replay buffer.
//! The crate also carries exact tabular oracles for the underlying
//! return-operator theory.

pub mod buffers;
pub mod config;
pub mod envs;
pub mod error;
pub mod learners;
pub mod nn;
pub mod ratio;
pub mod returns;

pub use error::{Error, Result};
