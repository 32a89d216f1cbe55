//! One mini-batch of the training objective, split into three stages:
//!
//! 1. [`forward`] records the network on a tape.
//! 2. [`plan_step`] reads forward values and fixes every non-differentiable
//!    decision: pseudo-labels, hardness values and weights, kernel
//!    bandwidths, hard-target selection.
//! 3. [`build_losses`] assembles the differentiable objective under that
//!    plan.
//!
//! Keeping the plan separate makes the objective a smooth function of the
//! parameters for a fixed plan, which is what finite-difference checks need.

use rand::Rng;

use crate::alignment::{self, FeatureBatch, KernelSpec};
use crate::hardness::{self, HardnessKind, HardnessMemory};
use crate::intra::{self, HardTargetBatch};
use crate::model::{self, BoundModel, ModelError, TargetForward};
use crate::numerics::{argmax, NumericsError, Tape, Tensor, Var};
use crate::Domain;

use super::config::ExperimentConfig;
use super::TrainError;

/// Augmented inputs of one step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub sources: Vec<SourceBatch>,
    pub target_x: Tensor,
    pub target_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub source_features: Vec<Var>,
    pub source_probs: Vec<Var>,
    pub target: TargetForward,
}

pub fn forward(tape: &mut Tape, bound: &BoundModel, batch: &StepBatch) -> Result<ForwardVars, ModelError> {
    let mut source_features = Vec::with_capacity(batch.sources.len());
    let mut source_probs = Vec::with_capacity(batch.sources.len());
    for (m, sb) in batch.sources.iter().enumerate() {
        let x = tape.constant(sb.x.clone());
        let (phi, p) = bound.forward_source(tape, x, m)?;
        source_features.push(phi);
        source_probs.push(p);
    }
    let xt = tape.constant(batch.target_x.clone());
    let target = bound.forward_target(tape, xt)?;
    Ok(ForwardVars {
        source_features,
        source_probs,
        target,
    })
}

/// Every hardness measure for the rows of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Measures {
    pub entropy: Vec<f64>,
    pub basic: Vec<f64>,
    pub smooth: Vec<f64>,
    pub comparative: Vec<f64>,
    pub clustered: Vec<f64>,
}

impl Measures {
    /// `probs` rows, reference classes `z`, previous smoothed values, and
    /// cluster keys for the clustered comparative measure.
    pub fn compute(
        probs: &Tensor,
        z: &[usize],
        prev: &[Option<f64>],
        beta: f64,
        groups: &[Option<usize>],
    ) -> Result<Self, hardness::HardnessError> {
        let n = probs.rows();
        let mut entropy = Vec::with_capacity(n);
        let mut basic = Vec::with_capacity(n);
        let mut smooth = Vec::with_capacity(n);
        for i in 0..n {
            let row = probs.row(i);
            entropy.push(hardness::shannon_entropy(row));
            let omega = hardness::basic_ahm(row, z[i])?;
            basic.push(omega);
            smooth.push(hardness::smooth_ahm(omega, prev[i], beta));
        }
        let comparative = hardness::comparative_ahm(&smooth, None)?;
        let clustered = hardness::comparative_ahm(&smooth, Some(groups))?;
        Ok(Self {
            entropy,
            basic,
            smooth,
            comparative,
            clustered,
        })
    }

    pub fn get(&self, kind: HardnessKind) -> &[f64] {
        match kind {
            HardnessKind::Entropy => &self.entropy,
            HardnessKind::Basic => &self.basic,
            HardnessKind::Smooth => &self.smooth,
            HardnessKind::Comparative => &self.comparative,
            HardnessKind::ComparativeClustered => &self.clustered,
        }
    }

    /// Value of `kind` mapped into `[0, 1]` for use as a mixing coefficient.
    pub fn coefficient(&self, kind: HardnessKind, classes: usize) -> Vec<f64> {
        let scale = match kind {
            HardnessKind::Entropy => 1.0 / (classes as f64).ln(),
            _ => 1.0,
        };
        self.get(kind).iter().map(|v| (v * scale).clamp(0.0, 1.0)).collect()
    }
}

/// Non-differentiable decisions for one step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub classes: usize,
    pub source_labels: Vec<Vec<usize>>,
    /// Pseudo-labels before corruption.
    pub clean_pseudo: Vec<Option<usize>>,
    /// Pseudo-labels the losses use.
    pub pseudo: Vec<Option<usize>>,
    pub source_measures: Vec<Measures>,
    pub target_measures: Measures,
    pub source_weights: Vec<Vec<f64>>,
    pub target_weights: Vec<f64>,
    pub kernels: Vec<KernelSpec>,
    pub selection: HardTargetBatch,
    pub plm: Option<Tensor>,
}

/// Optional randomness and ground truth consulted while planning.
pub struct PlanExtras<'a, R: Rng> {
    /// Target labels of the batch rows plus the rng that drives corruption.
    pub corruption: Option<(&'a [usize], f64, &'a mut R)>,
    /// Rng for hardness-agnostic selection.
    pub selection_rng: &'a mut R,
}

pub fn plan_step<R: Rng>(
    tape: &Tape,
    fwd: &ForwardVars,
    batch: &StepBatch,
    memory: &HardnessMemory,
    config: &ExperimentConfig,
    classes: usize,
    extras: PlanExtras<'_, R>,
) -> Result<StepPlan, TrainError> {
    let beta = config.hyper.beta;

    let mut source_measures = Vec::with_capacity(batch.sources.len());
    for (m, sb) in batch.sources.iter().enumerate() {
        let probs = tape.value(fwd.source_probs[m]);
        let prev: Vec<Option<f64>> = sb.ids.iter().map(|&id| memory.get(Domain::Source(m), id)).collect();
        let groups: Vec<Option<usize>> = sb.labels.iter().map(|&l| Some(l)).collect();
        source_measures.push(Measures::compute(probs, &sb.labels, &prev, beta, &groups)?);
    }

    let pw = tape.value(fwd.target.weighted);
    let clean_pseudo = model::pseudo_label(pw, config.hyper.tau);
    let mut pseudo = clean_pseudo.clone();
    if let Some((truth, ratio, rng)) = extras.corruption {
        corrupt(&mut pseudo, truth, ratio, classes, rng);
    }
    let z: Vec<usize> = (0..pw.rows()).map(|i| argmax(pw.row(i))).collect();
    let prev: Vec<Option<f64>> = batch.target_ids.iter().map(|&id| memory.get(Domain::Target, id)).collect();
    let target_measures = Measures::compute(pw, &z, &prev, beta, &pseudo)?;

    let inter_kind = config.ahm.inter;
    let source_weights = source_measures.iter().map(|m| m.get(inter_kind).to_vec()).collect();
    let target_weights = target_measures
        .get(inter_kind)
        .iter()
        .zip(&pseudo)
        .map(|(&w, p)| if p.is_some() { w } else { 0.0 })
        .collect();

    let kernels = (0..batch.sources.len())
        .map(|m| {
            KernelSpec::median_heuristic(
                tape.value(fwd.source_features[m]),
                tape.value(fwd.target.features[m]),
            )
        })
        .collect();

    let selection = if !config.toggles.pcm {
        HardTargetBatch::default()
    } else if config.toggles.selecting {
        intra::select_hard_targets(
            target_measures.get(config.ahm.intra),
            &pseudo,
            &batch.target_ids,
            config.hyper.ratio,
        )?
    } else {
        intra::select_random_targets(&pseudo, config.hyper.ratio, extras.selection_rng)?
    };
    let plm = if selection.is_empty() {
        None
    } else {
        Some(intra::build_plm(&intra::one_hot_rows(&selection.labels, classes))?)
    };

    Ok(StepPlan {
        classes,
        source_labels: batch.sources.iter().map(|s| s.labels.clone()).collect(),
        clean_pseudo,
        pseudo,
        source_measures,
        target_measures,
        source_weights,
        target_weights,
        kernels,
        selection,
        plm,
    })
}

/// Reassigns each correct pseudo-label with probability `ratio` to a
/// uniformly drawn different class.
fn corrupt<R: Rng>(pseudo: &mut [Option<usize>], truth: &[usize], ratio: f64, classes: usize, rng: &mut R) {
    for (p, &t) in pseudo.iter_mut().zip(truth) {
        if let Some(c) = *p {
            if c == t && rng.random::<f64>() < ratio {
                let shift = rng.random_range(1..classes);
                *p = Some((c + shift) % classes);
            }
        }
    }
}

/// Mean cross-entropy of `probs` rows against `labels`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize], classes: usize) -> Result<Var, NumericsError> {
    let onehot = tape.constant(intra::one_hot_rows(labels, classes));
    let logp = tape.log(probs);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// Differentiable loss terms of one step.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Var,
    pub cls: Vec<Var>,
    pub inter: Vec<Option<Var>>,
    pub intra: Vec<Option<Var>>,
    /// Sources whose clustered term had no shared class.
    pub wc_skipped: usize,
}

/// Scalar values of [`StepLosses`] summed over sources.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let sum = |vs: &mut dyn Iterator<Item = Var>| vs.map(|v| tape.scalar_value(v)).sum::<f64>();
        LossValues {
            cls: sum(&mut self.cls.iter().copied()),
            inter: sum(&mut self.inter.iter().flatten().copied()),
            intra: sum(&mut self.intra.iter().flatten().copied()),
            total: tape.scalar_value(self.total),
        }
    }
}

/// `Σ_m (λ₁·L_inter + λ₂·L_intra + L_cls)` under a fixed plan.
pub fn build_losses(
    tape: &mut Tape,
    fwd: &ForwardVars,
    plan: &StepPlan,
    config: &ExperimentConfig,
    lambda1: f64,
) -> Result<StepLosses, TrainError> {
    let classes = plan.classes;
    let toggles = &config.toggles;

    let labeled: Vec<usize> = (0..plan.pseudo.len()).filter(|&i| plan.pseudo[i].is_some()).collect();
    let target_ce = if labeled.is_empty() {
        None
    } else {
        let rows = tape.gather_rows(fwd.target.weighted, &labeled)?;
        let labels: Vec<usize> = labeled.iter().map(|&i| plan.pseudo[i].expect("labeled")).collect();
        Some(cross_entropy(tape, rows, &labels, classes)?)
    };

    let anchors = match &plan.plm {
        Some(_) => Some(tape.gather_rows(fwd.target.weighted, &plan.selection.indices)?),
        None => None,
    };

    let sources = fwd.source_probs.len();
    let mut cls = Vec::with_capacity(sources);
    let mut inter = Vec::with_capacity(sources);
    let mut intra_terms = Vec::with_capacity(sources);
    let mut wc_skipped = 0;
    let mut total: Option<Var> = None;

    for m in 0..sources {
        let src_ce = cross_entropy(tape, fwd.source_probs[m], &plan.source_labels[m], classes)?;
        let cls_m = match target_ce {
            Some(t) => tape.add(src_ce, t)?,
            None => src_ce,
        };
        let mut term = cls_m;
        cls.push(cls_m);

        let inter_m = if toggles.mmd {
            let source = FeatureBatch {
                features: fwd.source_features[m],
                labels: plan.source_labels[m].iter().map(|&l| Some(l)).collect(),
                weights: plan.source_weights[m].clone(),
            };
            let target = FeatureBatch {
                features: fwd.target.features[m],
                labels: plan.pseudo.clone(),
                weights: plan.target_weights.clone(),
            };
            let out = alignment::inter_loss(
                tape,
                &source,
                &target,
                &plan.kernels[m],
                toggles.weighting,
                toggles.wc_mmd,
            )?;
            if out.wc.as_ref().is_some_and(|w| w.skipped) {
                wc_skipped += 1;
            }
            let weighted = tape.scale(out.total, lambda1);
            term = tape.add(term, weighted)?;
            Some(out.total)
        } else {
            None
        };
        inter.push(inter_m);

        let intra_m = match (&plan.plm, anchors) {
            (Some(plm), Some(anchors)) => {
                let views = tape.gather_rows(fwd.target.probs[m], &plan.selection.indices)?;
                let pcm = intra::build_pcm(tape, anchors, views, config.hyper.tem)?;
                let loss = intra::intra_loss(tape, plm, pcm)?;
                let weighted = tape.scale(loss, config.hyper.lambda2);
                term = tape.add(term, weighted)?;
                Some(loss)
            }
            _ => None,
        };
        intra_terms.push(intra_m);

        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }

    Ok(StepLosses {
        total: total.ok_or_else(|| TrainError::Data("no source domains".into()))?,
        cls,
        inter,
        intra: intra_terms,
        wc_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_of_uniform_prediction() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0 / 3.0; 3]]));
        let l = cross_entropy(&mut tape, p, &[1], 3).unwrap();
        assert!((tape.scalar_value(l) - 3f64.ln()).abs() < 1e-12);
        assert!((tape.scalar_value(l) - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_of_perfect_prediction() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let l = cross_entropy(&mut tape, p, &[1, 0], 2).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-12);
    }

    #[test]
    fn corruption_only_touches_correct_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth = vec![0, 1, 2, 3, 0, 1];
        let mut pseudo = vec![Some(0), Some(2), None, Some(3), Some(0), Some(1)];
        corrupt(&mut pseudo, &truth, 1.0, 4, &mut rng);
        assert_eq!(pseudo[1], Some(2));
        assert_eq!(pseudo[2], None);
        for i in [0, 3, 4, 5] {
            let p = pseudo[i].unwrap();
            assert_ne!(p, truth[i]);
            assert!(p < 4);
        }
    }

    #[test]
    fn measures_follow_definitions() {
        let probs = Tensor::from_rows(&[vec![0.1, 0.1, 0.8], vec![0.2, 0.3, 0.5]]);
        let m = Measures::compute(&probs, &[2, 2], &[Some(0.5), None], 0.8, &[Some(2), Some(2)]).unwrap();
        assert!((m.basic[0] - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((m.smooth[0] - (0.4 + 0.2 * 0.02f64.sqrt())).abs() < 1e-15);
        assert_eq!(m.smooth[1], m.basic[1]);
        assert!((m.comparative.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(m.comparative, m.clustered);
        let c = m.coefficient(HardnessKind::Entropy, 3);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
