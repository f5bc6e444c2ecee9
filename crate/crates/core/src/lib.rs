//! Constrained sequence-policy optimization.
//!
//! A policy is trained on a supervised task objective while expected preference
//! rewards are held above thresholds. Constraints enter the objective through a
//! relaxed logarithmic barrier whose strength decays during training; the
//! baselines are plain supervised fine-tuning, weighted-sum reward maximization
//! and a min-max Lagrangian method with learned multipliers.

pub mod barrier;
pub mod constraints;
pub mod error;
pub mod harness;
pub mod policy;
pub mod rewards;
pub mod stats;
pub mod trainer;

pub use barrier::{barrier_grad, barrier_value, implied_multiplier, BarrierParams, BarrierSchedule};
pub use error::{Error, Result};
pub use constraints::{ConstraintEstimator, ConstraintKind, ConstraintSpec};
pub use policy::{Architecture, Checkpoint, GenerationConfig, Policy, Token, Vocab};
pub use rewards::{PreferenceTuple, RewardFn, RewardKind, RewardModel};
pub use trainer::{Method, TrainRun, TrainerConfig};
pub use harness::{load_config, run_experiment, ExperimentConfig, RunSummary};
