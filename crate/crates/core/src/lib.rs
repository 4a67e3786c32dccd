//! Preference-based PPO for agile flight: probabilistic reward ensembles,
//! pairwise preference collection, a rigid-body quadrotor simulator and the
//! training loop that ties them together.

pub mod approximator;
pub mod config;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod orchestrator;
pub mod ppo;
pub mod preference;
pub mod quad_dynamics;
pub mod reward_model;

pub use error::{Error, Result};
