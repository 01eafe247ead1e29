//! Finite-horizon mean field games and inverse reinforcement learning from
//! population demonstrations.

pub mod calculus;
pub mod demos;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mfirl;
pub mod mlp;
pub mod model;
pub mod plirl;
pub mod reward_model;
pub mod simulate;
pub mod solvers;

pub use error::{Error, Result};
pub use model::{
    ActionValueTable, KernelTable, MeanField, MeanFieldFlow, MfgSpec, PerStepPolicy, RewardOracle,
    TimeVaryingPolicy, TransitionKernel,
};
