//! Online reinforcement learning for chunked token-action policies in seeded
//! gridworld manipulation tasks: binary outcome rewards, group-relative
//! advantages with dynamic sampling, asymmetric clipping, and a supervised
//! imitation stage on scripted demonstrations.

pub mod config;
pub mod envsim;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod rng;
pub mod sft;

pub use error::{Error, Result};
