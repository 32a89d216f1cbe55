//! Per-sample hardness measures and the epoch-persistent hardness memory.
//!
//! - *Basic* hardness zeroes the reference-class entry of a prediction and
//!   takes the L2 norm of what is left. For source rows the reference is
//!   the real class; for target rows it is the argmax (pseudo-class).
//! - *Smooth* hardness is an exponential moving average of basic hardness
//!   across epochs, with the previous value read from [`HardnessMemory`].
//! - *Comparative* hardness divides smooth hardness by its sum over the
//!   batch, or over the same-class cluster within the batch.
//! - Shannon entropy of the prediction is kept as a baseline measure.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Domain;

#[derive(Debug, Error)]
pub enum HardnessError {
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("comparative hardness of an empty batch")]
    EmptyBatch,
    #[error("group assignment has {groups} entries for {values} values")]
    GroupLength { groups: usize, values: usize },
    #[error("hardness memory csv: {0}")]
    Csv(String),
}

/// Which hardness measure a value or scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HardnessKind {
    /// Shannon entropy.
    #[serde(rename = "E")]
    Entropy,
    /// Instantaneous basic hardness.
    #[serde(rename = "Omega")]
    Basic,
    /// Smoothed hardness.
    #[serde(rename = "S")]
    Smooth,
    /// Batch-normalized smoothed hardness.
    #[serde(rename = "H")]
    Comparative,
    /// Class-cluster-normalized smoothed hardness.
    #[serde(rename = "Hc")]
    ComparativeClustered,
}

impl HardnessKind {
    pub const ALL: [HardnessKind; 5] = [
        HardnessKind::Entropy,
        HardnessKind::Basic,
        HardnessKind::Smooth,
        HardnessKind::Comparative,
        HardnessKind::ComparativeClustered,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            HardnessKind::Entropy => "E",
            HardnessKind::Basic => "Omega",
            HardnessKind::Smooth => "S",
            HardnessKind::Comparative => "H",
            HardnessKind::ComparativeClustered => "Hc",
        }
    }
}

impl FromStr for HardnessKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HardnessKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| format!("unknown hardness kind {s:?}"))
    }
}

/// Hardness values aligned with the rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessVector {
    pub values: Vec<f64>,
    pub kind: HardnessKind,
}

/// L2 norm of `probs` after zeroing entry `z`.
pub fn basic_ahm(probs: &[f64], z: usize) -> Result<f64, HardnessError> {
    if z >= probs.len() {
        return Err(HardnessError::ClassIndex {
            index: z,
            classes: probs.len(),
        });
    }
    let sq: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != z)
        .map(|(_, &p)| p * p)
        .sum();
    Ok(sq.sqrt())
}

/// `β·prev + (1-β)·Ω`, or `Ω` itself on the first observation.
pub fn smooth_ahm(omega: f64, prev: Option<f64>, beta: f64) -> f64 {
    match prev {
        Some(p) => beta * p + (1.0 - beta) * omega,
        None => omega,
    }
}

/// Normalizes `values` to sum to one within each group.
///
/// With `groups = None` the whole batch is one group. Otherwise rows are
/// grouped by their key; rows keyed `None` belong to no group and get
/// weight zero. A group whose sum is zero gets uniform weights.
pub fn comparative_ahm(values: &[f64], groups: Option<&[Option<usize>]>) -> Result<Vec<f64>, HardnessError> {
    if values.is_empty() {
        return Err(HardnessError::EmptyBatch);
    }
    let keys: Vec<Option<usize>> = match groups {
        None => vec![Some(0); values.len()],
        Some(g) if g.len() != values.len() => {
            return Err(HardnessError::GroupLength {
                groups: g.len(),
                values: values.len(),
            })
        }
        Some(g) => g.to_vec(),
    };
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&v, key) in values.iter().zip(&keys) {
        if let Some(k) = key {
            let e = sums.entry(*k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(values
        .iter()
        .zip(&keys)
        .map(|(&v, key)| match key {
            None => 0.0,
            Some(k) => {
                let (total, count) = sums[k];
                if total > 0.0 {
                    v / total
                } else {
                    1.0 / count as f64
                }
            }
        })
        .collect())
}

/// `-Σ p log p` with `0·log 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Smoothed hardness per `(domain, sample id)` carried across epochs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HardnessMemory {
    entries: BTreeMap<(Domain, usize), f64>,
    epoch: usize,
}

/// One row of [`HardnessMemory::snapshot`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryRow {
    pub domain: Domain,
    pub sample_id: usize,
    pub smooth_hardness: f64,
}

pub const MEMORY_CSV_HEADER: &str = "domain,sample_id,smooth_hardness";

impl HardnessMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, domain: Domain, id: usize) -> Option<f64> {
        self.entries.get(&(domain, id)).copied()
    }

    pub fn set(&mut self, domain: Domain, id: usize, value: f64) {
        self.entries.insert((domain, id), value);
    }

    /// Smooths `omega` against the stored value, stores and returns it.
    pub fn update(&mut self, domain: Domain, id: usize, omega: f64, beta: f64) -> f64 {
        let s = smooth_ahm(omega, self.get(domain, id), beta);
        self.set(domain, id, s);
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn values_for(&self, pred: impl Fn(Domain) -> bool) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|((d, _), _)| pred(*d))
            .map(|(_, &v)| v)
            .collect()
    }

    /// All entries sorted by `(domain, sample id)`.
    pub fn snapshot(&self) -> Vec<MemoryRow> {
        self.entries
            .iter()
            .map(|(&(domain, sample_id), &smooth_hardness)| MemoryRow {
                domain,
                sample_id,
                smooth_hardness,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HardnessError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| HardnessError::Csv(e.to_string());
        out.write_record(MEMORY_CSV_HEADER.split(',')).map_err(err)?;
        for row in self.snapshot() {
            out.write_record([
                row.domain.to_string(),
                row.sample_id.to_string(),
                crate::fmt17(row.smooth_hardness),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| HardnessError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, HardnessError> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader
            .headers()
            .map_err(|e| HardnessError::Csv(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>().join(",") != MEMORY_CSV_HEADER {
            return Err(HardnessError::Csv(format!("unexpected header {headers:?}")));
        }
        let mut memory = Self::new();
        for record in reader.records() {
            let record = record.map_err(|e| HardnessError::Csv(e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |what: &str| HardnessError::Csv(format!("line {line}: bad {what}"));
            let domain: Domain = record.get(0).unwrap_or("").parse().map_err(|_| bad("domain"))?;
            let id: usize = record.get(1).unwrap_or("").parse().map_err(|_| bad("sample_id"))?;
            let value: f64 = record.get(2).unwrap_or("").parse().map_err(|_| bad("value"))?;
            memory.set(domain, id, value);
        }
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_worked_examples() {
        let src = basic_ahm(&[0.1, 0.1, 0.8], 2).unwrap();
        assert!((src - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((src - 0.141421).abs() < 1e-6);
        let tgt = basic_ahm(&[0.2, 0.3, 0.5], 2).unwrap();
        assert!((tgt - 0.13f64.sqrt()).abs() < 1e-12);
        assert!((tgt - 0.360555).abs() < 1e-6);
        assert_eq!(basic_ahm(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!(basic_ahm(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn smooth_examples() {
        assert!((smooth_ahm(0.1, Some(0.5), 0.8) - 0.42).abs() < 1e-15);
        assert_eq!(smooth_ahm(0.3, None, 0.8), 0.3);
        assert_eq!(smooth_ahm(0.1, Some(0.9), 0.0), 0.1);
    }

    #[test]
    fn comparative_examples() {
        let h = comparative_ahm(&[0.2, 0.3, 0.5], None).unwrap();
        for (a, b) in h.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(comparative_ahm(&[1.0; 4], None).unwrap(), vec![0.25; 4]);
        let hc = comparative_ahm(&[0.2, 0.6, 0.5], Some(&[Some(0), Some(0), Some(1)])).unwrap();
        assert!((hc[0] - 0.25).abs() < 1e-15);
        assert!((hc[1] - 0.75).abs() < 1e-15);
        assert_eq!(hc[2], 1.0);
        assert!(matches!(comparative_ahm(&[], None), Err(HardnessError::EmptyBatch)));
    }

    #[test]
    fn comparative_zero_group_and_ungrouped_rows() {
        let hc = comparative_ahm(&[0.0, 0.0, 0.4, 0.9], Some(&[Some(1), Some(1), Some(2), None])).unwrap();
        assert_eq!(hc, vec![0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]), 0.0);
        let e = shannon_entropy(&[0.2, 0.8]);
        let oracle = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
        assert!((e - oracle).abs() < 1e-15);
        assert!((e - 0.500402).abs() < 1e-6);
    }

    #[test]
    fn memory_snapshot_and_csv() {
        let mut mem = HardnessMemory::new();
        assert!(mem.snapshot().is_empty());
        mem.set(Domain::Target, 7, 0.42);
        assert_eq!(
            mem.snapshot(),
            vec![MemoryRow {
                domain: Domain::Target,
                sample_id: 7,
                smooth_hardness: 0.42
            }]
        );
        mem.set(Domain::Source(1), 3, 1.0 / 3.0);
        mem.set(Domain::Source(0), 9, 0.1);
        let snap = mem.snapshot();
        assert_eq!(snap[0].domain, Domain::Source(0));
        assert_eq!(snap[2].domain, Domain::Target);

        let mut buf = Vec::new();
        mem.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("domain,sample_id,smooth_hardness\n"));
        assert!(text.contains("t,7,4.1999999999999998e-1"), "{text}");
        let back = HardnessMemory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.snapshot(), mem.snapshot());
    }

    #[test]
    fn memory_update_smooths() {
        let mut mem = HardnessMemory::new();
        assert_eq!(mem.update(Domain::Target, 1, 0.5, 0.8), 0.5);
        assert!((mem.update(Domain::Target, 1, 0.1, 0.8) - 0.42).abs() < 1e-15);
    }
}
