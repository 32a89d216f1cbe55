//! Mini-batch training, evaluation and run artifacts.

mod config;
mod data;
mod evaluate;
mod metrics;
pub mod objective;
mod optim;
mod train;

pub use config::{
    AhmSelection, AugmentSections, ConfigError, Corruption, ExperimentConfig, Hyper, Optim, PredictionMode,
    TaskSource, Toggles, Widths,
};
pub use data::{gather_rows, LabeledSet, TrainData};
pub use evaluate::{evaluate, predict, Evaluation};
pub use metrics::{write_metrics_csv, EpochMetrics, ModeAccuracy, RunSummary, METRICS_CSV_HEADER};
pub use optim::{annealed_lr, Sgd};
pub use train::{
    memory_from_named, memory_to_named, model_dims, read_state_checkpoint, train, train_step, write_state_checkpoint,
    StepMetrics, TrainOutcome, TrainState,
};

use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::augment::AugmentError;
use crate::hardness::HardnessError;
use crate::intra::IntraError;
use crate::model::{CheckpointError, ModelError};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Hardness(#[from] HardnessError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Intra(#[from] IntraError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Hook(String),
}

/// Weight of the inter-domain term: `2 / (1 + exp(-θp)) - 1`.
pub fn lambda1_schedule(p: f64, theta: f64) -> f64 {
    2.0 / (1.0 + (-theta * p).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda1_examples() {
        assert_eq!(lambda1_schedule(0.0, 10.0), 0.0);
        assert!((lambda1_schedule(0.5, 10.0) - 0.986614).abs() < 1e-6);
        assert!((lambda1_schedule(1.0, 10.0) - 0.999909).abs() < 1e-6);
        let mut prev = -1.0;
        for i in 0..=100 {
            let v = lambda1_schedule(i as f64 / 100.0, 10.0);
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }
}
