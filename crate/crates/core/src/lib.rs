//! PPO training on small discrete environments with per-record influence
//! attribution, influence-based experience filtering and the diagnostics
//! built on top of it.

pub mod attribution;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod filtering;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod rng;

pub use env::{EnvId, EnvSpec, Environment, Observation, StepResult, TabularMdp};
pub use error::{Error, Result};
pub use nn::{Arch, GradVector, PolicyValueParams};
pub use ppo::{PpoConfig, RolloutBuffer, RolloutRecord, StepTrace};
