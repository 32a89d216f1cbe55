//! A training run with its files: metrics, summary, checkpoints and the
//! hardness memory dump.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use crate::pipeline::{
    self, evaluate, write_metrics_csv, write_state_checkpoint, ExperimentConfig, ModeAccuracy, PredictionMode,
    RunSummary, TrainData, TrainError, TrainOutcome,
};

use super::task::{generate_task, load_target_labels, load_train_data, TaskSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MEMORY_FILE: &str = "hardness_memory.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("model_epoch{epoch:04}.ckpt")
}

/// Training data and target labels named by the config: the manifest
/// when given, otherwise the built-in task.
pub fn resolve_task(config: &ExperimentConfig) -> Result<(TrainData, Vec<usize>)> {
    match &config.task.manifest {
        Some(path) => {
            let data = load_train_data(path)?;
            let labels = load_target_labels(path)?;
            Ok((data, labels))
        }
        None => {
            let task = generate_task(&TaskSpec::default_task(config.task.seed))?;
            Ok((task.train_data(), task.target.y))
        }
    }
}

/// Every prediction mode available for `sources` heads.
pub fn all_modes(sources: usize) -> Vec<PredictionMode> {
    let mut modes = vec![PredictionMode::Weighted, PredictionMode::Average];
    modes.extend((0..sources).map(PredictionMode::Source));
    modes
}

/// Trains and writes all run artifacts into `out`.
pub fn run_training(
    config: &ExperimentConfig,
    data: &TrainData,
    target_labels: &[usize],
    out: &Path,
) -> Result<(TrainOutcome, RunSummary)> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let start = Instant::now();
    let modes = all_modes(data.sources.len());
    let mut best = vec![0.0f64; modes.len()];
    let every = config.checkpoint_every;

    let outcome = pipeline::train(config, data, Some(target_labels), |state, row| {
        for (b, &m) in best.iter_mut().zip(&modes) {
            let acc = evaluate(&state.model, &data.target_x, target_labels, m)?.accuracy;
            *b = b.max(acc);
        }
        if every > 0 && row.epoch % every == 0 {
            let path = out.join(epoch_checkpoint_name(row.epoch));
            write_state_checkpoint(&path, &state.model, &state.memory)?;
        }
        Ok::<(), TrainError>(())
    })?;

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).with_context(|| format!("cannot create {}", metrics_path.display()))?;
    write_metrics_csv(BufWriter::new(file), &outcome.metrics)?;

    write_state_checkpoint(&out.join(FINAL_CHECKPOINT), &outcome.state.model, &outcome.state.memory)?;
    let mem_path = out.join(MEMORY_FILE);
    outcome
        .state
        .memory
        .write_csv(BufWriter::new(File::create(&mem_path)?))?;

    let mut accuracy = Vec::with_capacity(modes.len());
    for (&m, &b) in modes.iter().zip(&best) {
        let final_accuracy = evaluate(&outcome.state.model, &data.target_x, target_labels, m)?.accuracy;
        accuracy.push(ModeAccuracy {
            mode: m.to_string(),
            final_accuracy,
            best_accuracy: b.max(final_accuracy),
        });
    }
    let summary = RunSummary {
        seed: config.seed,
        epochs: config.epochs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        accuracy,
        ensemble_weights: outcome.state.model.ensemble_weights(),
        config: config.clone(),
    };
    let summary_path = out.join(SUMMARY_FILE);
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    Ok((outcome, summary))
}

/// Files written by [`run_training`] whose bytes depend only on config,
/// seed and data.
pub fn deterministic_artifacts(out: &Path, config: &ExperimentConfig) -> Vec<PathBuf> {
    let mut files = vec![out.join(METRICS_FILE), out.join(FINAL_CHECKPOINT), out.join(MEMORY_FILE)];
    if config.checkpoint_every > 0 {
        for e in (config.checkpoint_every..=config.epochs).step_by(config.checkpoint_every) {
            files.push(out.join(epoch_checkpoint_name(e)));
        }
    }
    files
}
