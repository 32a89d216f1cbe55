//! Central-difference checks of every training loss on a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, FeatureBatch, GramSet};
use crate::hardness::HardnessMemory;
use crate::intra;
use crate::model::{BoundModel, ModelDims, ModelState};
use crate::numerics::{grad_check_with, Tape, Tensor, Var};
use crate::pipeline::objective::{self, ForwardVars, PlanExtras, SourceBatch, StepBatch, StepPlan};
use crate::pipeline::{ExperimentConfig, TrainError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A network of a few hundred parameters with one frozen step plan.
pub struct Toy {
    pub model: ModelState,
    pub batch: StepBatch,
    pub plan: StepPlan,
    pub config: ExperimentConfig,
    pub lambda1: f64,
}

pub fn toy_dims() -> ModelDims {
    ModelDims {
        input_dim: 2,
        hidden: 6,
        feat_dim: 5,
        adapt_hidden: 5,
        aligned_dim: 4,
        classes: 3,
        sources: 2,
    }
}

impl Toy {
    pub fn new(seed: u64) -> Result<Self, TrainError> {
        let dims = toy_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ModelState::init(dims, &mut rng)?;
        // Nonzero biases and ensemble logits keep ReLU inputs and ties away
        // from the kinks a central difference would straddle.
        let names = model.names().to_vec();
        for (name, p) in names.iter().zip(model.params_mut()) {
            if !name.contains(".w") {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let b = 8;
        let random_x = |rng: &mut ChaCha8Rng| {
            Tensor::matrix(b, dims.input_dim, (0..b * dims.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        };
        let sources = (0..dims.sources)
            .map(|_| SourceBatch {
                x: random_x(&mut rng),
                labels: (0..b).map(|i| i % dims.classes).collect(),
                ids: (0..b).collect(),
            })
            .collect();
        let batch = StepBatch {
            sources,
            target_x: random_x(&mut rng),
            target_ids: (0..b).collect(),
        };

        let mut config = ExperimentConfig::default();
        // Label every target row so each term is active.
        config.hyper.tau = 0.0;
        config.hyper.ratio = 0.5;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let fwd = objective::forward(&mut tape, &bound, &batch)?;
        let mut memory = HardnessMemory::new();
        for i in 0..b {
            memory.set(crate::Domain::Target, i, 0.1 * i as f64);
        }
        let plan = objective::plan_step(
            &tape,
            &fwd,
            &batch,
            &memory,
            &config,
            dims.classes,
            PlanExtras::<ChaCha8Rng> {
                corruption: None,
                selection_rng: &mut rng,
            },
        )?;
        Ok(Self {
            model,
            batch,
            plan,
            config,
            lambda1: 0.7,
        })
    }

    /// Worst relative gradient error of `term` over every model parameter.
    pub fn check<F>(&self, term: F) -> Result<f64, TrainError>
    where
        F: Fn(&mut Tape, &ForwardVars, &Self) -> Result<Var, TrainError>,
    {
        grad_check_with(self.model.params(), STEP, |tape, vars| {
            let bound = BoundModel::from_vars(*self.model.dims(), vars.to_vec())?;
            let fwd = objective::forward(tape, &bound, &self.batch)?;
            term(tape, &fwd, self)
        })
    }
}

fn mmd_term(tape: &mut Tape, fwd: &ForwardVars, toy: &Toy) -> Result<Var, TrainError> {
    let grams = GramSet::build(tape, fwd.source_features[0], fwd.target.features[0], &toy.plan.kernels[0])?;
    Ok(grams.mmd2(tape)?)
}

fn wc_term(tape: &mut Tape, fwd: &ForwardVars, toy: &Toy) -> Result<Var, TrainError> {
    let grams = GramSet::build(tape, fwd.source_features[0], fwd.target.features[0], &toy.plan.kernels[0])?;
    let source = FeatureBatch {
        features: fwd.source_features[0],
        labels: toy.plan.source_labels[0].iter().map(|&l| Some(l)).collect(),
        weights: toy.plan.source_weights[0].clone(),
    };
    let target = FeatureBatch {
        features: fwd.target.features[0],
        labels: toy.plan.pseudo.clone(),
        weights: toy.plan.target_weights.clone(),
    };
    Ok(alignment::wc_mmd2(tape, &grams, &source, &target)?.loss)
}

fn intra_term(tape: &mut Tape, fwd: &ForwardVars, toy: &Toy) -> Result<Var, TrainError> {
    let plm = toy.plan.plm.as_ref().ok_or_else(|| TrainError::Data("toy plan selected no rows".into()))?;
    let idx = &toy.plan.selection.indices;
    let anchors = tape.gather_rows(fwd.target.weighted, idx)?;
    let views = tape.gather_rows(fwd.target.probs[0], idx)?;
    let pcm = intra::build_pcm(tape, anchors, views, toy.config.hyper.tem)?;
    Ok(intra::intra_loss(tape, plm, pcm)?)
}

fn cls_term(tape: &mut Tape, fwd: &ForwardVars, toy: &Toy) -> Result<Var, TrainError> {
    let classes = toy.plan.classes;
    let src = objective::cross_entropy(tape, fwd.source_probs[0], &toy.plan.source_labels[0], classes)?;
    let rows: Vec<usize> = (0..toy.plan.pseudo.len()).filter(|&i| toy.plan.pseudo[i].is_some()).collect();
    let labels: Vec<usize> = rows.iter().filter_map(|&i| toy.plan.pseudo[i]).collect();
    let picked = tape.gather_rows(fwd.target.weighted, &rows)?;
    let tgt = objective::cross_entropy(tape, picked, &labels, classes)?;
    Ok(tape.add(src, tgt)?)
}

fn total_term(tape: &mut Tape, fwd: &ForwardVars, toy: &Toy) -> Result<Var, TrainError> {
    Ok(objective::build_losses(tape, fwd, &toy.plan, &toy.config, toy.lambda1)?.total)
}

/// Named loss checks in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, TrainError> {
    let toy = Toy::new(seed)?;
    type Term = fn(&mut Tape, &ForwardVars, &Toy) -> Result<Var, TrainError>;
    let terms: [(&'static str, Term); 5] = [
        ("mmd", mmd_term),
        ("wc_mmd", wc_term),
        ("intra", intra_term),
        ("cls", cls_term),
        ("total", total_term),
    ];
    terms
        .iter()
        .map(|&(name, f)| Ok((name, toy.check(f)?)))
        .collect()
}
