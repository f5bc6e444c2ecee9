//! Shared fixtures for the benchmarks.

use l3m::harness::{generate_task_data, TaskDataset, TaskKind, TaskSpec};
use l3m::{Architecture, Policy, Vocab};

/// Copy task at the size the length experiments use.
pub fn copy_task() -> TaskDataset {
    generate_task_data(&TaskSpec {
        kind: TaskKind::Copy,
        vocab: 16,
        min_body: 3,
        max_body: 14,
        train: 1000,
        validation: 100,
        test: 200,
        seed: 0,
    })
    .expect("valid task spec")
}

pub fn policy(arch: Architecture) -> Policy {
    Policy::init(Vocab::new(16).expect("vocab"), arch, 0).expect("policy")
}

pub const MLP: Architecture = Architecture::Mlp { embed_dim: 8, hidden_dim: 32 };
