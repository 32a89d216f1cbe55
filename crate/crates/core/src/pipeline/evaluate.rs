use crate::model::{ModelError, ModelState};
use crate::numerics::Tensor;

use super::config::PredictionMode;

/// Accuracy with a `confusion[true][predicted]` count table.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Class probabilities of every row of `x` under `mode`.
pub fn predict(model: &ModelState, x: &Tensor, mode: PredictionMode) -> Result<Tensor, ModelError> {
    let ids: Vec<usize> = (0..x.rows()).collect();
    let out = model.forward_target(x, &ids)?;
    Ok(match mode {
        PredictionMode::Weighted => out.weighted.probs,
        PredictionMode::Average => out.average().probs,
        PredictionMode::Source(m) => {
            let sources = out.per_source.len();
            out.per_source
                .into_iter()
                .nth(m)
                .ok_or(ModelError::SourceIndex { index: m, sources })?
                .probs
        }
    })
}

pub fn evaluate(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    mode: PredictionMode,
) -> Result<Evaluation, ModelError> {
    let classes = model.dims().classes;
    let mut confusion = vec![vec![0; classes]; classes];
    if labels.is_empty() {
        return Ok(Evaluation {
            accuracy: 0.0,
            confusion,
        });
    }
    let probs = predict(model, x, mode)?;
    let mut correct = 0;
    for (pred, &truth) in probs.row_argmax().into_iter().zip(labels) {
        confusion[truth][pred] += 1;
        correct += usize::from(pred == truth);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(sources: usize) -> ModelDims {
        ModelDims {
            input_dim: 2,
            hidden: 4,
            feat_dim: 3,
            adapt_hidden: 4,
            aligned_dim: 3,
            classes: 3,
            sources,
        }
    }

    #[test]
    fn single_source_modes_coincide() {
        let model = ModelState::init(dims(1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5], vec![2.0, -0.3]]);
        let w = predict(&model, &x, PredictionMode::Weighted).unwrap();
        let a = predict(&model, &x, PredictionMode::Average).unwrap();
        let s = predict(&model, &x, PredictionMode::Source(0)).unwrap();
        for ((p, q), r) in w.data().iter().zip(a.data()).zip(s.data()) {
            assert!((p - q).abs() < 1e-15 && (p - r).abs() < 1e-15);
        }
        assert!(predict(&model, &x, PredictionMode::Source(1)).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let model = ModelState::init(dims(2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, 0.2], vec![-1.0, 0.4]]);
        let labels = predict(&model, &x, PredictionMode::Weighted).unwrap().row_argmax();
        let e = evaluate(&model, &x, &labels, PredictionMode::Weighted).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let total: usize = e.confusion.iter().flatten().sum();
        assert_eq!(total, 2);
    }
}
