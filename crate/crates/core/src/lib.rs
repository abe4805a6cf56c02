//! Two-phase prompt screening for RL fine-tuning, checked on a tabular
//! softmax policy and timed on a simulated rollout clock.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod trainer;
pub mod verify;

pub use error::{Result, SpeedError};
