//! Target-side consistency between weighted and per-source predictions on
//! the hardest pseudo-labeled samples of a batch.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum IntraError {
    #[error("row {0} of the pseudo-label matrix is not one-hot")]
    NotOneHot(usize),
    #[error("matrix shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("selection ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Selected rows of a target batch and their pseudo-classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HardTargetBatch {
    /// Row positions within the target batch.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl HardTargetBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `max(1, floor(ratio · eligible))`, or 0 with nothing eligible.
pub fn selection_size(eligible: usize, ratio: f64) -> usize {
    if eligible == 0 {
        0
    } else {
        ((ratio * eligible as f64).floor() as usize).clamp(1, eligible)
    }
}

fn check_ratio(ratio: f64) -> Result<(), IntraError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(IntraError::Ratio(ratio))
    }
}

/// Keeps the top `ratio` fraction of pseudo-labeled rows by hardness,
/// ties broken by lower sample id. Output is in ranking order.
pub fn select_hard_targets(
    hardness: &[f64],
    pseudo: &[Option<usize>],
    sample_ids: &[usize],
    ratio: f64,
) -> Result<HardTargetBatch, IntraError> {
    check_ratio(ratio)?;
    let mut eligible: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i].is_some()).collect();
    eligible.sort_by(|&i, &j| {
        hardness[j]
            .total_cmp(&hardness[i])
            .then(sample_ids[i].cmp(&sample_ids[j]))
    });
    eligible.truncate(selection_size(eligible.len(), ratio));
    Ok(HardTargetBatch {
        labels: eligible.iter().map(|&i| pseudo[i].expect("eligible")).collect(),
        indices: eligible,
    })
}

/// Hardness-agnostic selection of the same size, for ablations.
pub fn select_random_targets<R: Rng + ?Sized>(
    pseudo: &[Option<usize>],
    ratio: f64,
    rng: &mut R,
) -> Result<HardTargetBatch, IntraError> {
    check_ratio(ratio)?;
    let mut eligible: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i].is_some()).collect();
    let k = selection_size(eligible.len(), ratio);
    eligible.shuffle(rng);
    eligible.truncate(k);
    Ok(HardTargetBatch {
        labels: eligible.iter().map(|&i| pseudo[i].expect("eligible")).collect(),
        indices: eligible,
    })
}

/// Stacked one-hot rows.
pub fn one_hot_rows(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// `PL · PLᵀ` for one-hot rows `PL`.
pub fn build_plm(pl: &Tensor) -> Result<Tensor, IntraError> {
    for i in 0..pl.rows() {
        let row = pl.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(IntraError::NotOneHot(i));
        }
    }
    Ok(pl.matmul(&pl.transpose())?)
}

/// Row `i` is `softmax_j(anchor_i · view_j / tem)` over every selected `j`.
pub fn build_pcm(tape: &mut Tape, anchors: Var, views: Var, tem: f64) -> Result<Var, IntraError> {
    if tem.is_nan() || tem <= 0.0 {
        return Err(IntraError::Temperature(tem));
    }
    let vt = tape.transpose(views)?;
    let logits = tape.matmul(anchors, vt)?;
    let scaled = tape.scale(logits, 1.0 / tem);
    Ok(tape.row_softmax(scaled)?)
}

/// Mean absolute difference between the label and contrastive matrices.
pub fn intra_loss(tape: &mut Tape, plm: &Tensor, pcm: Var) -> Result<Var, IntraError> {
    if plm.shape() != tape.value(pcm).shape() {
        return Err(IntraError::Shape(plm.shape().to_vec(), tape.value(pcm).shape().to_vec()));
    }
    let target = tape.constant(plm.clone());
    let diff = tape.sub(pcm, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_half_by_hardness() {
        let sel = select_hard_targets(
            &[0.4, 0.1, 0.3, 0.2],
            &[Some(0), Some(1), Some(2), Some(0)],
            &[0, 1, 2, 3],
            0.5,
        )
        .unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        assert_eq!(sel.labels, vec![0, 2]);
    }

    #[test]
    fn full_ratio_keeps_every_labeled_row() {
        let pseudo = [Some(0), None, Some(1), Some(1)];
        let sel = select_hard_targets(&[0.1, 0.9, 0.2, 0.3], &pseudo, &[5, 6, 7, 8], 1.0).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 2, 3]);
    }

    #[test]
    fn ties_prefer_lower_sample_id() {
        let sel = select_hard_targets(&[0.5, 0.5, 0.5], &[Some(0); 3], &[9, 2, 4], 0.4).unwrap();
        assert_eq!(sel.indices, vec![1]);
    }

    #[test]
    fn no_labels_no_selection() {
        let sel = select_hard_targets(&[0.5, 0.2], &[None, None], &[0, 1], 0.4).unwrap();
        assert!(sel.is_empty());
        assert!(select_hard_targets(&[0.5], &[Some(0)], &[0], 0.0).is_err());
    }

    #[test]
    fn random_selection_size_matches() {
        let pseudo: Vec<Option<usize>> = (0..10).map(|i| (i % 3 != 0).then_some(i % 2)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_random_targets(&pseudo, 0.4, &mut rng).unwrap();
        assert_eq!(sel.len(), selection_size(6, 0.4));
        assert!(sel.indices.iter().all(|&i| pseudo[i].is_some()));
    }

    #[test]
    fn plm_examples() {
        let plm = build_plm(&one_hot_rows(&[0, 0, 1], 2)).unwrap();
        assert_eq!(plm, Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]));
        assert_eq!(build_plm(&one_hot_rows(&[3], 4)).unwrap(), Tensor::from_rows(&[vec![1.0]]));
        assert_eq!(build_plm(&one_hot_rows(&[0, 1, 2], 3)).unwrap(), Tensor::identity(3));
        let bad = Tensor::from_rows(&[vec![0.5, 0.5]]);
        assert!(matches!(build_plm(&bad), Err(IntraError::NotOneHot(0))));
    }

    #[test]
    fn pcm_examples() {
        let mut tape = Tape::new();
        let same = tape.constant(Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7]]));
        let pcm = build_pcm(&mut tape, same, same, 0.15).unwrap();
        for &v in tape.value(pcm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let single = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8]]));
        let pcm = build_pcm(&mut tape, single, single, 0.15).unwrap();
        assert_eq!(tape.value(pcm).data(), &[1.0]);

        let eye = tape.constant(Tensor::identity(2));
        let pcm = build_pcm(&mut tape, eye, eye, 0.15).unwrap();
        let e = (1.0f64 / 0.15).exp();
        let diag = e / (e + 1.0);
        assert!((diag - 0.998729).abs() < 1e-6);
        let v = tape.value(pcm);
        assert!((v.get(0, 0) - diag).abs() < 1e-15);
        assert!((v.get(1, 1) - diag).abs() < 1e-15);
        assert!((v.get(0, 1) - (1.0 - diag)).abs() < 1e-15);
    }

    #[test]
    fn intra_loss_examples() {
        let mut tape = Tape::new();
        let plm = Tensor::identity(2);
        let eq = tape.constant(plm.clone());
        let l0 = intra_loss(&mut tape, &plm, eq).unwrap();
        assert_eq!(tape.scalar_value(l0), 0.0);
        let pcm = tape.constant(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]));
        let l = intra_loss(&mut tape, &plm, pcm).unwrap();
        assert!((tape.scalar_value(l) - 0.15).abs() < 1e-15);
        let wrong = tape.constant(Tensor::identity(3));
        assert!(matches!(intra_loss(&mut tape, &plm, wrong), Err(IntraError::Shape(..))));
    }
}
