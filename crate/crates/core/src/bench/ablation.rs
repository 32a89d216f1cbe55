//! Variant grids over a base configuration, run over several seeds.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::hardness::HardnessKind;
use crate::pipeline::{self, evaluate, ExperimentConfig, PredictionMode, TrainData, TrainError};

/// One grid entry: a name and the configuration it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
    /// Evaluation modes; each produces its own table row named
    /// `name/mode` when more than one is listed.
    pub modes: Vec<PredictionMode>,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: ExperimentConfig) -> Self {
        let modes = vec![config.prediction_mode];
        Self {
            name: name.into(),
            config,
            modes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Ladder,
    AhmSwap,
    PredictionModes,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ladder" => Ok(Self::Ladder),
            "ahm-swap" => Ok(Self::AhmSwap),
            "prediction-modes" => Ok(Self::PredictionModes),
            _ => Err(format!("unknown preset {s:?} (ladder|ahm-swap|prediction-modes)")),
        }
    }
}

/// The inter-domain MMD term alone.
pub fn baseline_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.toggles.mmd = true;
    c.toggles.augmentation = false;
    c.toggles.wc_mmd = false;
    c.toggles.pcm = false;
    c
}

/// Every component switched on.
pub fn full_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    let t = &mut c.toggles;
    t.mmd = true;
    t.augmentation = true;
    t.adjusting = true;
    t.wc_mmd = true;
    t.weighting = true;
    t.pcm = true;
    t.selecting = true;
    c
}

/// Cumulative ladder: the baseline, then augmentation, clustered MMD and
/// the contrastive term added in turn, each without and with its
/// hardness-driven part.
pub fn ladder(base: &ExperimentConfig) -> Vec<Variant> {
    let mut c = baseline_config(base);
    let mut out = vec![Variant::new("baseline", c.clone())];

    c.toggles.augmentation = true;
    c.toggles.adjusting = false;
    out.push(Variant::new("aug_wo_adjusting", c.clone()));
    c.toggles.adjusting = true;
    out.push(Variant::new("aug_w_adjusting", c.clone()));

    c.toggles.wc_mmd = true;
    c.toggles.weighting = false;
    out.push(Variant::new("wc_wo_weighting", c.clone()));
    c.toggles.weighting = true;
    out.push(Variant::new("wc_w_weighting", c.clone()));

    c.toggles.pcm = true;
    c.toggles.selecting = false;
    out.push(Variant::new("pcm_wo_selecting", c.clone()));
    c.toggles.selecting = true;
    out.push(Variant::new("pcm_w_selecting", c));
    out
}

/// The full configuration with one measure swapped at one consumer.
pub fn ahm_swap(base: &ExperimentConfig) -> Vec<Variant> {
    let full = full_config(base);
    let mut out = Vec::new();
    for scenario in ["augmentation", "inter", "intra"] {
        for kind in HardnessKind::ALL {
            let mut c = full.clone();
            match scenario {
                "augmentation" => c.ahm.augmentation = kind,
                "inter" => c.ahm.inter = kind,
                _ => c.ahm.intra = kind,
            }
            out.push(Variant::new(format!("{scenario}:{}", kind.tag()), c));
        }
    }
    out
}

/// One full run scored under every prediction combination.
pub fn prediction_modes(base: &ExperimentConfig, sources: usize) -> Vec<Variant> {
    let mut modes = vec![PredictionMode::Weighted, PredictionMode::Average];
    modes.extend((0..sources).map(PredictionMode::Source));
    vec![Variant {
        name: "full".into(),
        config: full_config(base),
        modes,
    }]
}

pub fn preset_variants(preset: Preset, base: &ExperimentConfig, sources: usize) -> Vec<Variant> {
    match preset {
        Preset::Ladder => ladder(base),
        Preset::AhmSwap => ahm_swap(base),
        Preset::PredictionModes => prediction_modes(base, sources),
    }
}

/// One `(variant, seed)` cell; failures are kept, not propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: Result<f64, String>,
}

/// Final-epoch target accuracy for each requested mode.
pub fn run_single(
    config: &ExperimentConfig,
    data: &TrainData,
    target_labels: &[usize],
    modes: &[PredictionMode],
) -> Result<Vec<f64>, TrainError> {
    let outcome = pipeline::train(config, data, Some(target_labels), |_, _| Ok(()))?;
    modes
        .iter()
        .map(|&m| Ok(evaluate(&outcome.state.model, &data.target_x, target_labels, m)?.accuracy))
        .collect()
}

/// Trains every variant under every seed in parallel. Rows come back in
/// grid order, seeds innermost, and each cell depends only on its own
/// configuration and seed.
pub fn run_ablation(variants: &[Variant], seeds: &[u64], data: &TrainData, target_labels: &[usize]) -> Vec<AblationRow> {
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Vec<AblationRow>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let mut config = v.config.clone();
            config.seed = seed;
            let accs = run_single(&config, data, target_labels, &v.modes);
            let name = |m: PredictionMode| {
                if v.modes.len() == 1 {
                    v.name.clone()
                } else {
                    format!("{}/{m}", v.name)
                }
            };
            match accs {
                Ok(accs) => v
                    .modes
                    .iter()
                    .zip(accs)
                    .map(|(&m, a)| AblationRow {
                        variant: name(m),
                        seed,
                        accuracy: Ok(a),
                    })
                    .collect(),
                Err(e) => v
                    .modes
                    .iter()
                    .map(|&m| AblationRow {
                        variant: name(m),
                        seed,
                        accuracy: Err(e.to_string()),
                    })
                    .collect(),
            }
        })
        .collect();
    results.into_iter().flatten().collect()
}

/// Mean and population standard deviation per variant over successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub failures: usize,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == name)
                .filter_map(|r| r.accuracy.as_ref().ok().copied())
                .collect();
            let failures = rows.iter().filter(|r| r.variant == name && r.accuracy.is_err()).count();
            let (mean, std) = mean_std(&accs);
            VariantSummary {
                variant: name.to_string(),
                mean,
                std,
                runs: accs.len(),
                failures,
            }
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub const TABLE_CSV_HEADER: &str = "variant,seed,accuracy";

/// `table.csv`; failed cells get an empty accuracy field.
pub fn write_table<W: Write>(w: W, rows: &[AblationRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TABLE_CSV_HEADER.split(','))?;
    for r in rows {
        let acc = r.accuracy.as_ref().map(|&a| crate::fmt17(a)).unwrap_or_default();
        out.write_record([r.variant.clone(), r.seed.to_string(), acc])?;
    }
    out.flush()?;
    Ok(())
}
