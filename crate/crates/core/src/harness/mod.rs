//! Experiment configuration, seeded orchestration, reporting and the
//! verification suite.

mod experiment;
mod snapshot;
mod solver;
mod verify;

use thiserror::Error;

pub use experiment::{
    apply_sweep, evaluation_seed, mean_and_stderr, read_rows, run_experiment, training_seed, write_rows, ExperimentOutcome,
    ExperimentSpec, ReplicaResult, ResultRow, RowWriter, Sweep, SweepVariable, SCHEMA_VERSION,
};
pub use snapshot::{config_hash, PolicySnapshot, SNAPSHOT_VERSION};
pub use solver::{prepare, ExactPolicy, FeatureSpec, SolverKind, SolverSpec, TrainedPolicy};
pub use verify::*;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("unsupported schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed policy snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Exact(#[from] crate::exact::ExactError),
    #[error(transparent)]
    Learn(#[from] crate::qlearn::LearnError),
    #[error(transparent)]
    Aggregate(#[from] crate::aggregate::AggregateError),
    #[error(transparent)]
    CrossEntropy(#[from] crate::crossent::CeError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
}
