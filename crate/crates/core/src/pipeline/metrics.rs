use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::fmt17;

use super::config::ExperimentConfig;

pub const METRICS_CSV_HEADER: &str = "epoch,l_cls,l_inter,l_intra,l_total,lambda1,target_acc,pl_rate,pl_acc,hard_src_mean,hard_src_std,hard_tgt_mean,hard_tgt_std";

/// One row of `metrics.csv`. Loss values are per-step means over the epoch.
/// Accuracy fields are absent when no target labels were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub target_acc: Option<f64>,
    /// Fraction of target rows that received a pseudo-label.
    pub pl_rate: f64,
    /// Fraction of assigned pseudo-labels that are correct.
    pub pl_acc: Option<f64>,
    pub hard_src_mean: f64,
    pub hard_src_std: f64,
    pub hard_tgt_mean: f64,
    pub hard_tgt_std: f64,
}

impl EpochMetrics {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            fmt17(self.l_cls),
            fmt17(self.l_inter),
            fmt17(self.l_intra),
            fmt17(self.l_total),
            fmt17(self.lambda1),
            opt(self.target_acc),
            fmt17(self.pl_rate),
            opt(self.pl_acc),
            fmt17(self.hard_src_mean),
            fmt17(self.hard_src_std),
            fmt17(self.hard_tgt_mean),
            fmt17(self.hard_tgt_std),
        ]
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[EpochMetrics]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_CSV_HEADER.split(','))?;
    for r in rows {
        out.write_record(r.record())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

/// Written as `summary.json` at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub wall_clock_seconds: f64,
    pub accuracy: Vec<ModeAccuracy>,
    pub ensemble_weights: Vec<f64>,
    pub config: ExperimentConfig,
}

/// Population mean and standard deviation; zeros for an empty slice.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let row = EpochMetrics {
            epoch: 1,
            l_cls: 1.0,
            l_inter: 0.5,
            l_intra: 0.25,
            l_total: 2.0,
            lambda1: 0.0,
            target_acc: Some(0.75),
            pl_rate: 0.5,
            pl_acc: None,
            hard_src_mean: 0.1,
            hard_src_std: 0.0,
            hard_tgt_mean: 0.2,
            hard_tgt_std: 0.0,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], "1");
        assert_eq!(fields[8], "");
        assert_eq!(fields[6].parse::<f64>().unwrap(), 0.75);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
