use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::augment::adaptive_augment;
use crate::hardness::{HardnessKind, HardnessMemory};
use crate::model::{self, ModelDims, ModelState, NamedTensor};
use crate::numerics::{Tape, Tensor};
use crate::{rng, Domain};

use super::config::ExperimentConfig;
use super::data::{gather_rows, TrainData};
use super::evaluate::evaluate;
use super::metrics::{mean_std, EpochMetrics};
use super::objective::{self, LossValues, PlanExtras, SourceBatch, StepBatch};
use super::optim::Sgd;
use super::{lambda1_schedule, TrainError};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const STREAM_SELECT: u64 = 5;

fn domain_code(d: Domain) -> u64 {
    match d {
        Domain::Source(m) => m as u64,
        Domain::Target => 1 << 32,
    }
}

pub fn model_dims(config: &ExperimentConfig, input_dim: usize, classes: usize, sources: usize) -> ModelDims {
    ModelDims {
        input_dim,
        hidden: config.model.hidden,
        feat_dim: config.model.feat_dim,
        adapt_hidden: config.model.adapt_hidden,
        aligned_dim: config.model.aligned_dim,
        classes,
        sources,
    }
}

/// Everything carried from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: Sgd,
    /// Smoothed hardness per sample.
    pub memory: HardnessMemory,
    /// Latest augmentation coefficient per sample when augmentation is
    /// driven by a measure other than the smoothed one.
    pub aug_memory: HardnessMemory,
    pub global_step: usize,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, data: &TrainData) -> Result<Self, TrainError> {
        let dims = model_dims(config, data.input_dim(), data.classes, data.sources.len());
        let model = ModelState::init(dims, &mut rng::stream(config.seed, &[STREAM_INIT]))?;
        let optimizer = Sgd::new(config.optim.clone(), model.params());
        Ok(Self {
            model,
            optimizer,
            memory: HardnessMemory::new(),
            aug_memory: HardnessMemory::new(),
            global_step: 0,
            epochs_done: 0,
        })
    }

    /// Mixing coefficient for augmenting one sample.
    fn augment_coefficient(&self, config: &ExperimentConfig, domain: Domain, id: usize) -> f64 {
        if !config.toggles.adjusting {
            return 0.0;
        }
        let stored = match config.ahm.augmentation {
            HardnessKind::Smooth => self.memory.get(domain, id),
            _ => self.aug_memory.get(domain, id),
        };
        stored.unwrap_or(1.0).clamp(0.0, 1.0)
    }
}

/// Per-step schedule values and evaluation-only context.
#[derive(Debug, Clone)]
pub(crate) struct StepContext<'a> {
    pub epoch: usize,
    pub step: usize,
    pub progress: f64,
    pub lambda1: f64,
    /// True labels of the target batch rows, for pseudo-label accuracy and
    /// corruption.
    pub target_truth: Option<&'a [usize]>,
    pub corrupt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub losses: LossValues,
    pub lambda1: f64,
    pub target_rows: usize,
    pub pseudo_assigned: usize,
    pub pseudo_correct: usize,
    pub wc_skipped: usize,
}

/// Runs one optimization step on already augmented batches.
pub fn train_step(
    state: &mut TrainState,
    batch: &StepBatch,
    config: &ExperimentConfig,
    lambda1: f64,
    progress: f64,
) -> Result<StepMetrics, TrainError> {
    let ctx = StepContext {
        epoch: state.epochs_done,
        step: state.global_step,
        progress,
        lambda1,
        target_truth: None,
        corrupt: false,
    };
    step_inner(state, batch, config, &ctx)
}

pub(crate) fn step_inner(
    state: &mut TrainState,
    batch: &StepBatch,
    config: &ExperimentConfig,
    ctx: &StepContext<'_>,
) -> Result<StepMetrics, TrainError> {
    let classes = state.model.dims().classes;
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, true);
    let fwd = objective::forward(&mut tape, &bound, batch)?;

    let step_seed = [ctx.epoch as u64, ctx.step as u64];
    let mut corrupt_rng = rng::stream(config.seed, &[STREAM_CORRUPT, step_seed[0], step_seed[1]]);
    let mut select_rng = rng::stream(config.seed, &[STREAM_SELECT, step_seed[0], step_seed[1]]);
    let corruption = match (ctx.corrupt, ctx.target_truth) {
        (true, Some(truth)) => Some((truth, config.corruption.ratio, &mut corrupt_rng)),
        (true, None) => return Err(TrainError::Data("pseudo-label corruption needs target labels".into())),
        _ => None,
    };
    let plan = objective::plan_step(
        &tape,
        &fwd,
        batch,
        &state.memory,
        config,
        classes,
        PlanExtras {
            corruption,
            selection_rng: &mut select_rng,
        },
    )?;
    let losses = objective::build_losses(&mut tape, &fwd, &plan, config, ctx.lambda1)?;
    let values = losses.values(&tape);
    if ![values.cls, values.inter, values.intra, values.total].iter().all(|v| v.is_finite()) {
        let ids: Vec<String> = batch
            .sources
            .iter()
            .enumerate()
            .map(|(m, s)| format!("s{m} ids {:?}", s.ids))
            .collect();
        return Err(TrainError::NonFinite {
            epoch: ctx.epoch,
            step: ctx.step,
            detail: format!(
                "losses {values:?}; {}; t ids {:?}; pseudo {:?}",
                ids.join("; "),
                batch.target_ids,
                plan.pseudo
            ),
        });
    }

    let grads = tape.backward(losses.total)?;
    let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    let groups = state.model.groups().to_vec();
    state
        .optimizer
        .step(state.model.params_mut(), &groups, &grads, ctx.progress);

    let aug_kind = config.ahm.augmentation;
    for (m, sb) in batch.sources.iter().enumerate() {
        let measures = &plan.source_measures[m];
        let coef = measures.coefficient(aug_kind, classes);
        for (i, &id) in sb.ids.iter().enumerate() {
            state.memory.set(Domain::Source(m), id, measures.smooth[i]);
            if aug_kind != HardnessKind::Smooth {
                state.aug_memory.set(Domain::Source(m), id, coef[i]);
            }
        }
    }
    let coef = plan.target_measures.coefficient(aug_kind, classes);
    for (i, &id) in batch.target_ids.iter().enumerate() {
        state.memory.set(Domain::Target, id, plan.target_measures.smooth[i]);
        if aug_kind != HardnessKind::Smooth {
            state.aug_memory.set(Domain::Target, id, coef[i]);
        }
    }
    state.global_step += 1;

    let pseudo_assigned = plan.clean_pseudo.iter().flatten().count();
    let pseudo_correct = ctx.target_truth.map_or(0, |truth| {
        plan.clean_pseudo
            .iter()
            .zip(truth)
            .filter(|(p, &t)| **p == Some(t))
            .count()
    });
    Ok(StepMetrics {
        losses: values,
        lambda1: ctx.lambda1,
        target_rows: batch.target_ids.len(),
        pseudo_assigned,
        pseudo_correct,
        wc_skipped: losses.wc_skipped,
    })
}

/// Final state and one metrics row per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

fn shuffled(n: usize, seed: u64, epoch: usize, domain: Domain) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, &[STREAM_SHUFFLE, epoch as u64, domain_code(domain)]));
    ids
}

fn augment_rows(
    state: &TrainState,
    config: &ExperimentConfig,
    x: &Tensor,
    ids: &[usize],
    domain: Domain,
    epoch: usize,
) -> Result<Tensor, TrainError> {
    let raw = gather_rows(x, ids);
    if !config.toggles.augmentation {
        return Ok(raw);
    }
    let policy = match domain {
        Domain::Source(_) => &config.augment.source,
        Domain::Target => &config.augment.target,
    };
    let mut data = Vec::with_capacity(raw.numel());
    for (i, &id) in ids.iter().enumerate() {
        let h = state.augment_coefficient(config, domain, id);
        let mut r = rng::stream(
            config.seed,
            &[STREAM_AUGMENT, epoch as u64, domain_code(domain), id as u64],
        );
        data.extend(adaptive_augment(raw.row(i), h, policy, &mut r)?);
    }
    Ok(Tensor::matrix(ids.len(), raw.cols(), data))
}

fn check_data(config: &ExperimentConfig, data: &TrainData, target_labels: Option<&[usize]>) -> Result<usize, TrainError> {
    let b = config.batch_size;
    if data.sources.is_empty() {
        return Err(TrainError::Data("no source domains".into()));
    }
    let d = data.input_dim();
    for (m, s) in data.sources.iter().enumerate() {
        if s.x.rows() != s.y.len() || s.x.cols() != d {
            return Err(TrainError::Data(format!("source {m} rows or width mismatch")));
        }
        if let Some(&bad) = s.y.iter().find(|&&y| y >= data.classes) {
            return Err(TrainError::Data(format!("source {m} label {bad} out of range")));
        }
    }
    if data.target_x.rows() < b {
        return Err(TrainError::Data(format!(
            "target has {} rows, fewer than the batch size {b}",
            data.target_x.rows()
        )));
    }
    if let Some(labels) = target_labels {
        if labels.len() != data.target_x.rows() {
            return Err(TrainError::Data("target label count differs from target rows".into()));
        }
    }
    if config.corruption.ratio > 0.0 && target_labels.is_none() {
        return Err(TrainError::Data("pseudo-label corruption needs target labels".into()));
    }
    let steps = data.sources.iter().map(|s| s.len() / b).min().unwrap_or(0);
    if steps == 0 {
        return Err(TrainError::Data(format!("a source has fewer rows than the batch size {b}")));
    }
    Ok(steps)
}

/// Trains from a fresh state. `target_labels` is read only for metrics and
/// for the corruption experiment. `on_epoch` sees every finished epoch.
pub fn train<F>(
    config: &ExperimentConfig,
    data: &TrainData,
    target_labels: Option<&[usize]>,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<(), TrainError>,
{
    config.validate()?;
    let mut state = TrainState::new(config, data)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome { state, metrics });
    }
    let steps = check_data(config, data, target_labels)?;
    let b = config.batch_size;
    let total_steps = (config.epochs * steps) as f64;
    let n_target = data.target_x.rows();

    for epoch in 0..config.epochs {
        let source_orders: Vec<Vec<usize>> = data
            .sources
            .iter()
            .enumerate()
            .map(|(m, s)| shuffled(s.len(), config.seed, epoch, Domain::Source(m)))
            .collect();
        let target_order = shuffled(n_target, config.seed, epoch, Domain::Target);
        let corrupt = config.corruption.active(epoch);

        let mut sums = LossValues::default();
        let mut lambda1 = 0.0;
        let (mut rows, mut assigned, mut correct) = (0, 0, 0);
        for s in 0..steps {
            let mut sources = Vec::with_capacity(data.sources.len());
            for (m, set) in data.sources.iter().enumerate() {
                let ids = source_orders[m][s * b..(s + 1) * b].to_vec();
                let x = augment_rows(&state, config, &set.x, &ids, Domain::Source(m), epoch)?;
                sources.push(SourceBatch {
                    x,
                    labels: ids.iter().map(|&i| set.y[i]).collect(),
                    ids,
                });
            }
            let target_ids: Vec<usize> = (0..b).map(|j| target_order[(s * b + j) % n_target]).collect();
            let target_x = augment_rows(&state, config, &data.target_x, &target_ids, Domain::Target, epoch)?;
            let truth: Option<Vec<usize>> = target_labels.map(|l| target_ids.iter().map(|&i| l[i]).collect());
            let batch = StepBatch {
                sources,
                target_x,
                target_ids,
            };

            let progress = state.global_step as f64 / total_steps;
            lambda1 = config
                .hyper
                .lambda1
                .unwrap_or_else(|| lambda1_schedule(progress, config.hyper.theta));
            let ctx = StepContext {
                epoch,
                step: state.global_step,
                progress,
                lambda1,
                target_truth: truth.as_deref(),
                corrupt,
            };
            let m = step_inner(&mut state, &batch, config, &ctx)?;
            sums.cls += m.losses.cls;
            sums.inter += m.losses.inter;
            sums.intra += m.losses.intra;
            sums.total += m.losses.total;
            rows += m.target_rows;
            assigned += m.pseudo_assigned;
            correct += m.pseudo_correct;
        }
        state.memory.advance_epoch();
        state.epochs_done += 1;

        let n = steps as f64;
        let (hard_src_mean, hard_src_std) = mean_std(&state.memory.values_for(|d| d != Domain::Target));
        let (hard_tgt_mean, hard_tgt_std) = mean_std(&state.memory.values_for(|d| d == Domain::Target));
        let target_acc = match target_labels {
            Some(l) => Some(evaluate(&state.model, &data.target_x, l, config.prediction_mode)?.accuracy),
            None => None,
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            l_cls: sums.cls / n,
            l_inter: sums.inter / n,
            l_intra: sums.intra / n,
            l_total: sums.total / n,
            lambda1,
            target_acc,
            pl_rate: assigned as f64 / rows as f64,
            pl_acc: target_labels.map(|_| if assigned == 0 { 0.0 } else { correct as f64 / assigned as f64 }),
            hard_src_mean,
            hard_src_std,
            hard_tgt_mean,
            hard_tgt_std,
        };
        on_epoch(&state, &row)?;
        metrics.push(row);
    }
    Ok(TrainOutcome { state, metrics })
}

/// Hardness memory as checkpoint entries, two per domain.
pub fn memory_to_named(memory: &HardnessMemory) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = Vec::new();
    let mut current: Option<(Domain, Vec<f64>, Vec<f64>)> = None;
    let flush = |out: &mut Vec<NamedTensor>, (d, ids, vals): (Domain, Vec<f64>, Vec<f64>)| {
        let n = ids.len();
        out.push(NamedTensor {
            name: format!("memory/{d}/ids"),
            tensor: Tensor::matrix(1, n, ids),
        });
        out.push(NamedTensor {
            name: format!("memory/{d}/values"),
            tensor: Tensor::matrix(1, n, vals),
        });
    };
    for row in memory.snapshot() {
        match &mut current {
            Some((d, ids, vals)) if *d == row.domain => {
                ids.push(row.sample_id as f64);
                vals.push(row.smooth_hardness);
            }
            _ => {
                if let Some(done) = current.take() {
                    flush(&mut out, done);
                }
                current = Some((row.domain, vec![row.sample_id as f64], vec![row.smooth_hardness]));
            }
        }
    }
    if let Some(done) = current {
        flush(&mut out, done);
    }
    out
}

pub fn memory_from_named(entries: &[NamedTensor]) -> Result<HardnessMemory, TrainError> {
    let mut memory = HardnessMemory::new();
    for e in entries {
        let Some(domain) = e.name.strip_prefix("memory/").and_then(|r| r.strip_suffix("/ids")) else {
            continue;
        };
        let d: Domain = domain
            .parse()
            .map_err(|_| TrainError::Data(format!("bad memory domain {domain:?}")))?;
        let values = entries
            .iter()
            .find(|v| v.name == format!("memory/{domain}/values"))
            .ok_or_else(|| TrainError::Data(format!("memory values for {domain} missing")))?;
        if values.tensor.numel() != e.tensor.numel() {
            return Err(TrainError::Data(format!("memory ids and values differ in length for {domain}")));
        }
        for (&id, &v) in e.tensor.data().iter().zip(values.tensor.data()) {
            memory.set(d, id as usize, v);
        }
    }
    Ok(memory)
}

const DIMS_ENTRY: &str = "meta/dims";

/// Model parameters, layer widths and hardness memory in one file.
pub fn write_state_checkpoint(path: &Path, model: &ModelState, memory: &HardnessMemory) -> Result<(), TrainError> {
    let d = model.dims();
    let dims = [d.input_dim, d.hidden, d.feat_dim, d.adapt_hidden, d.aligned_dim, d.classes, d.sources];
    let mut entries = vec![NamedTensor {
        name: DIMS_ENTRY.into(),
        tensor: Tensor::matrix(1, dims.len(), dims.iter().map(|&v| v as f64).collect()),
    }];
    entries.extend(model.to_named());
    entries.extend(memory_to_named(memory));
    let file = File::create(path)?;
    model::write_checkpoint(BufWriter::new(file), &entries)?;
    Ok(())
}

pub fn read_state_checkpoint(path: &Path) -> Result<(ModelState, HardnessMemory), TrainError> {
    let file = File::open(path)
        .map_err(|e| TrainError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let entries = model::read_checkpoint(BufReader::new(file))?;
    let dims = entries
        .iter()
        .find(|e| e.name == DIMS_ENTRY)
        .ok_or_else(|| TrainError::Data(format!("{} has no {DIMS_ENTRY} entry", path.display())))?;
    let v: Vec<usize> = dims.tensor.data().iter().map(|&x| x as usize).collect();
    if v.len() != 7 {
        return Err(TrainError::Data("checkpoint dims entry must have 7 values".into()));
    }
    let dims = ModelDims {
        input_dim: v[0],
        hidden: v[1],
        feat_dim: v[2],
        adapt_hidden: v[3],
        aligned_dim: v[4],
        classes: v[5],
        sources: v[6],
    };
    let model = ModelState::from_named(dims, &entries)?;
    Ok((model, memory_from_named(&entries)?))
}
