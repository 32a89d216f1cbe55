//! Kernel mean-embedding discrepancies between source and target features.
//!
//! All losses are expressed through Gram matrices on the tape, so a
//! squared RKHS distance between two weighted mean embeddings is
//! `aᵀK_ss a + bᵀK_tt b − 2 aᵀK_st b`. Plain MMD uses uniform weights
//! `1/n`; the weighted-clustered variant uses per-sample hardness weights
//! and compares same-class groups (attract) against the pooled
//! other-class target rows (repel).

use std::collections::BTreeSet;

use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("empty feature batch")]
    EmptyBatch,
    #[error("{what}: {got} entries for {rows} rows")]
    Length {
        what: &'static str,
        got: usize,
        rows: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Bandwidth multipliers applied to the median-heuristic scale.
pub const BANDWIDTH_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Mixture of gaussian kernels `k(x, y) = mean_σ exp(-‖x−y‖² / (2σ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn single(sigma: f64) -> Self {
        Self {
            bandwidths: vec![sigma],
        }
    }

    /// Scale = square root of the median pairwise squared distance over
    /// the pooled rows of `x` and `y`, times [`BANDWIDTH_FACTORS`]. Falls
    /// back to scale 1 when every pooled row coincides.
    pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Self {
        let rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).chain((0..y.rows()).map(|i| y.row(i))).collect();
        let mut d2 = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                d2.push(sq_dist(rows[i], rows[j]));
            }
        }
        let base = median(&mut d2).map(f64::sqrt).filter(|s| s.is_finite() && *s > 0.0).unwrap_or(1.0);
        Self {
            bandwidths: BANDWIDTH_FACTORS.iter().map(|f| f * base).collect(),
        }
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = sq_dist(a, b);
        self.bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / self.bandwidths.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Gram matrix `K[i][j] = k(x_i, y_j)` as a differentiable tape node.
pub fn kernel_matrix(tape: &mut Tape, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var, AlignmentError> {
    let xx = tape.mul(x, x)?;
    let sx = tape.row_sum(xx)?;
    let yy = tape.mul(y, y)?;
    let sy = tape.row_sum(yy)?;
    let sy_t = tape.transpose(sy)?;
    let y_t = tape.transpose(y)?;
    let cross = tape.matmul(x, y_t)?;
    let cross2 = tape.scale(cross, 2.0);
    let outer = tape.add(sx, sy_t)?;
    let d2 = tape.sub(outer, cross2)?;
    let mut acc: Option<Var> = None;
    for &s in &kernel.bandwidths {
        let scaled = tape.scale(d2, -1.0 / (2.0 * s * s));
        let k = tape.exp(scaled);
        acc = Some(match acc {
            None => k,
            Some(a) => tape.add(a, k)?,
        });
    }
    let sum = acc.expect("kernel needs at least one bandwidth");
    Ok(tape.scale(sum, 1.0 / kernel.bandwidths.len() as f64))
}

/// Gram matrices of a source/target feature pair.
#[derive(Debug, Clone, Copy)]
pub struct GramSet {
    pub ss: Var,
    pub tt: Var,
    pub st: Var,
    pub n_source: usize,
    pub n_target: usize,
}

impl GramSet {
    pub fn build(tape: &mut Tape, source: Var, target: Var, kernel: &KernelSpec) -> Result<Self, AlignmentError> {
        let (n_source, n_target) = (tape.value(source).rows(), tape.value(target).rows());
        if n_source == 0 || n_target == 0 {
            return Err(AlignmentError::EmptyBatch);
        }
        Ok(Self {
            ss: kernel_matrix(tape, source, source, kernel)?,
            tt: kernel_matrix(tape, target, target, kernel)?,
            st: kernel_matrix(tape, source, target, kernel)?,
            n_source,
            n_target,
        })
    }

    /// `‖Σ aᵢφ(sᵢ) − Σ bⱼφ(tⱼ)‖²` in the kernel's RKHS.
    pub fn weighted_distance(&self, tape: &mut Tape, a: &[f64], b: &[f64]) -> Result<Var, AlignmentError> {
        check_len("source weights", a.len(), self.n_source)?;
        check_len("target weights", b.len(), self.n_target)?;
        let quad = |tape: &mut Tape, left: &[f64], k: Var, right: &[f64]| -> Result<Var, AlignmentError> {
            let l = tape.constant(Tensor::matrix(1, left.len(), left.to_vec()));
            let r = tape.constant(Tensor::matrix(right.len(), 1, right.to_vec()));
            let lk = tape.matmul(l, k)?;
            Ok(tape.matmul(lk, r)?)
        };
        let ss = quad(tape, a, self.ss, a)?;
        let tt = quad(tape, b, self.tt, b)?;
        let st = quad(tape, a, self.st, b)?;
        let st2 = tape.scale(st, 2.0);
        let both = tape.add(ss, tt)?;
        Ok(tape.sub(both, st2)?)
    }

    /// Biased squared MMD with uniform weights.
    pub fn mmd2(&self, tape: &mut Tape) -> Result<Var, AlignmentError> {
        let a = vec![1.0 / self.n_source as f64; self.n_source];
        let b = vec![1.0 / self.n_target as f64; self.n_target];
        self.weighted_distance(tape, &a, &b)
    }
}

fn check_len(what: &'static str, got: usize, rows: usize) -> Result<(), AlignmentError> {
    if got != rows {
        return Err(AlignmentError::Length { what, got, rows });
    }
    Ok(())
}

/// Biased squared MMD between the rows of `x` and `y`.
pub fn mmd2(tape: &mut Tape, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var, AlignmentError> {
    GramSet::build(tape, x, y, kernel)?.mmd2(tape)
}

/// Features with per-row class attributes and alignment weights.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Var,
    /// Real class for source rows, pseudo-class (or `None`) for target rows.
    pub labels: Vec<Option<usize>>,
    pub weights: Vec<f64>,
}

/// Attract and repel terms of one shared class.
#[derive(Debug, Clone, Copy)]
pub struct ClassTerm {
    pub class: usize,
    pub attract: Var,
    pub repel: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct WcMmd {
    pub loss: Var,
    /// True when source and target batches share no class.
    pub skipped: bool,
    pub terms: Vec<ClassTerm>,
}

/// Classes present among source labels and assigned target pseudo-labels.
pub fn common_classes(source: &[Option<usize>], target: &[Option<usize>]) -> Vec<usize> {
    let s: BTreeSet<usize> = source.iter().flatten().copied().collect();
    let t: BTreeSet<usize> = target.iter().flatten().copied().collect();
    s.intersection(&t).copied().collect()
}

/// Weighted-clustered squared MMD.
///
/// For each shared class `k`: the distance between the weighted source
/// embedding of class `k` and the weighted target embedding of rows
/// pseudo-labeled `k` (weights used as given), minus the distance between
/// the same source embedding and the pooled target rows pseudo-labeled
/// with any other class (pool weights rescaled to sum to one).
pub fn wc_mmd2(
    tape: &mut Tape,
    grams: &GramSet,
    source: &FeatureBatch,
    target: &FeatureBatch,
) -> Result<WcMmd, AlignmentError> {
    check_len("source labels", source.labels.len(), grams.n_source)?;
    check_len("target labels", target.labels.len(), grams.n_target)?;
    check_len("source weights", source.weights.len(), grams.n_source)?;
    check_len("target weights", target.weights.len(), grams.n_target)?;

    let classes = common_classes(&source.labels, &target.labels);
    if classes.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(WcMmd {
            loss: zero,
            skipped: true,
            terms: Vec::new(),
        });
    }

    let masked = |batch: &FeatureBatch, keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
        batch
            .labels
            .iter()
            .zip(&batch.weights)
            .map(|(l, &w)| match l {
                Some(c) if keep(*c) => w,
                _ => 0.0,
            })
            .collect()
    };

    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(classes.len());
    for &k in &classes {
        let a = masked(source, &|c| c == k);
        let b_same = masked(target, &|c| c == k);
        let attract = grams.weighted_distance(tape, &a, &b_same)?;

        let mut b_other = masked(target, &|c| c != k);
        let pool: f64 = b_other.iter().sum();
        let has_pool = target.labels.iter().flatten().any(|&c| c != k);
        let repel = if has_pool {
            if pool > 0.0 {
                b_other.iter_mut().for_each(|w| *w /= pool);
            } else {
                let count = target.labels.iter().flatten().filter(|&&c| c != k).count() as f64;
                for (w, l) in b_other.iter_mut().zip(&target.labels) {
                    if matches!(l, Some(c) if *c != k) {
                        *w = 1.0 / count;
                    }
                }
            }
            Some(grams.weighted_distance(tape, &a, &b_other)?)
        } else {
            None
        };

        let term = match repel {
            Some(r) => tape.sub(attract, r)?,
            None => attract,
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
        terms.push(ClassTerm {
            class: k,
            attract,
            repel,
        });
    }
    Ok(WcMmd {
        loss: total.expect("non-empty class set"),
        skipped: false,
        terms,
    })
}

/// `1/|group|` for every labeled row, zero for unlabeled rows.
pub fn uniform_group_weights(labels: &[Option<usize>]) -> Vec<f64> {
    labels
        .iter()
        .map(|l| match l {
            Some(c) => 1.0 / labels.iter().filter(|x| *x == &Some(*c)).count() as f64,
            None => 0.0,
        })
        .collect()
}

/// Combined inter-domain loss and its parts.
#[derive(Debug, Clone)]
pub struct InterLoss {
    pub total: Var,
    pub mmd: Var,
    pub wc: Option<WcMmd>,
}

/// `mmd2 + wc_mmd2`. With `weighting` off the clustered term uses uniform
/// within-group weights; with `clustered` off only `mmd2` is returned.
pub fn inter_loss(
    tape: &mut Tape,
    source: &FeatureBatch,
    target: &FeatureBatch,
    kernel: &KernelSpec,
    weighting: bool,
    clustered: bool,
) -> Result<InterLoss, AlignmentError> {
    let grams = GramSet::build(tape, source.features, target.features, kernel)?;
    let mmd = grams.mmd2(tape)?;
    if !clustered {
        return Ok(InterLoss {
            total: mmd,
            mmd,
            wc: None,
        });
    }
    let wc = if weighting {
        wc_mmd2(tape, &grams, source, target)?
    } else {
        let s = FeatureBatch {
            weights: uniform_group_weights(&source.labels),
            ..source.clone()
        };
        let t = FeatureBatch {
            weights: uniform_group_weights(&target.labels),
            ..target.clone()
        };
        wc_mmd2(tape, &grams, &s, &t)?
    };
    let total = tape.add(mmd, wc.loss)?;
    Ok(InterLoss {
        total,
        mmd,
        wc: Some(wc),
    })
}
