//! Hardness-aware multi-source domain adaptation on synthetic tasks.
//!
//! The crate trains a shared extractor with one aligned extractor and
//! classifier per source domain, combines the per-source predictions with
//! trainable ensemble weights, and adapts to an unlabeled target domain
//! using per-sample hardness to drive augmentation strength, kernel
//! alignment weights, and hard-sample selection for a prediction-level
//! contrastive constraint.
//!
//! Module map:
//! - [`numerics`]: tensors and the reverse-mode tape every loss runs on.
//! - [`model`]: network, ensemble weighting, pseudo-labels, checkpoints.
//! - [`hardness`]: basic / smooth / comparative hardness, entropy, memory.
//! - [`augment`]: weak and strong perturbations and their hardness mix.
//! - [`alignment`]: MMD and its weighted class-clustered variant.
//! - [`intra`]: hard-target selection, label and contrastive matrices.
//! - [`pipeline`]: configuration, training loop, evaluation, metrics.
//! - [`bench`]: synthetic tasks, file I/O, ablation grids, CLI.

pub mod alignment;
pub mod augment;
pub mod bench;
pub mod hardness;
pub mod intra;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;

use std::fmt;
use std::str::FromStr;

/// Which domain a sample belongs to. Sources are numbered from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Source(usize),
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source(m) => write!(f, "s{m}"),
            Domain::Target => f.write_str("t"),
        }
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "t" {
            return Ok(Domain::Target);
        }
        s.strip_prefix('s')
            .and_then(|n| n.parse().ok())
            .map(Domain::Source)
            .ok_or_else(|| format!("invalid domain tag {s:?}"))
    }
}

/// Decimal rendering with 17 significant digits; parses back to the same bits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
