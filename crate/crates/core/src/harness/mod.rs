//! Experiment harness: synthetic data, configuration files, evaluation and run artifacts.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;

pub use config::{load_config, parse_config, ExperimentConfig, ResolvedExperiment};
pub use data::{generate_preference_data, generate_task_data, Channel, PreferenceSpec, TaskDataset, TaskKind, TaskSpec};
pub use eval::{evaluate, EvalConfig, EvalReport, EvalSamples};
pub use experiment::{
    collect_summaries, evaluate_checkpoint, generate_data, report_markdown, run_experiment, run_suite, train_reward_model,
    RewardModelSummary, RunSummary,
};
