//! Training loops for deep concept removal and its baselines.
//!
//! [`train_dcr`] adds `gamma` times a differentiable CAV penalty at every probe point to the
//! supervised loss. Each update refines the probe CAVs on fresh concept batches, solves the
//! curvature system over the buffered activations, and backpropagates the surrogate through
//! the concept batch. [`train_erm`] and [`train_adversarial_baseline`] share the same loop,
//! logging and run-directory layout.

pub mod batch;
pub mod config;
pub mod error;
pub mod loss;
pub mod optim;
pub mod run;
pub mod train;
pub mod update;

pub use batch::{epoch_batches, gather, labeled_batch, Batch, ConceptSampler};
pub use config::{Method, OptimizerKind, TrainConfig};
pub use error::{Result, TrainError};
pub use loss::LinearAdversary;
pub use optim::Optimizer;
pub use run::{EpochRecord, LossBreakdown, ProbeRecord, RunDir, RunLog, RunStatus};
pub use train::{
    accuracy, check_probe_batchnorm, predict, train_adversarial_baseline, train_dcr, train_erm, EvalSet, TrainOutcome,
};
pub use update::{
    adversarial_update, dcr_update, erm_update, init_probe_states, ProbeRuntimeState, ProbeStepMetrics, StepMetrics,
};

pub type ProbeRuntimeStateF32 = ProbeRuntimeState<f32>;
pub type ProbeRuntimeStateF64 = ProbeRuntimeState<f64>;
pub type TrainOutcomeF32 = TrainOutcome<f32>;
pub type TrainOutcomeF64 = TrainOutcome<f64>;
