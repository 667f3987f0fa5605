//! Mix-policy reinforcement learning at desk scale.
//!
//! A tiny autoregressive policy is trained on synthetic verifiable-reward
//! token tasks with a clipped token-mean surrogate. Trajectories can be
//! assembled from a frozen behavior-policy prefix and a current-policy
//! continuation, with per-token importance ratios taken against whichever
//! policy generated each token.

pub mod error;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
