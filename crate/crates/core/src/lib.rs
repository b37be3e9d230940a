//! Heavy-tailed bandit optimization: bonus-shifted FTRL policies for multi-armed
//! and linear bandits, the optimal designs they explore with, calibrated
//! heavy-tailed environments, and a seeded regret harness.

pub mod design;
pub mod env;
pub mod error;
pub mod estimators;
pub mod ftrl;
pub mod harness;
pub mod policies;
pub mod types;

pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, Prepared, RegretCurve};
pub use policies::{Policy, PolicyConfig};
pub use types::{
    mix, normalize, FeatureSet, GapProfile, HeavyTailSpec, InvariantFlags, RoundRecord,
    SimplexDistribution,
};
