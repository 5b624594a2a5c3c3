//! Deterministic discrete-event simulation of replicas on a FIFO mesh.
//!
//! Time is kept in microseconds. Events fire in `(time, replica, seq)` order,
//! so a config and seed fully determine a run.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod workload;

use thiserror::Error;

pub use config::{Algorithm, LatencyMatrix, LatencyPreset, LatencySpec, Mix, SimConfig, REAL_LATENCY_MS};
pub use engine::{run_simulation, simulate_once, SimOutput, APPLY_COST_US, LOCK_SITE};
pub use metrics::{export_metrics, summary_table, OpRecord, RecordStatus, RunMetrics};
pub use workload::{gen_workload, RequestKind, Slot, Workload};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config-invalid: {0}")]
    Config(String),
    #[error("infeasible workload: {0}")]
    Infeasible(String),
    #[error("simulation did not drain: {0}")]
    Stalled(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
