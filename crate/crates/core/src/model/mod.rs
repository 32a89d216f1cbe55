//! The adaptation network: a shared extractor, one aligned extractor and
//! classifier per source, and softmax-normalized ensemble weights.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, NamedTensor};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::Domain;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("source index {index} out of range for {sources} sources")]
    SourceIndex { index: usize, sources: usize },
    #[error("invalid model dimensions: {0}")]
    Dims(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub adapt_hidden: usize,
    pub aligned_dim: usize,
    pub classes: usize,
    pub sources: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 64,
            feat_dim: 32,
            adapt_hidden: 64,
            aligned_dim: 32,
            classes: 4,
            sources: 3,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sources < 1 {
            return Err(ModelError::Dims("at least one source is required".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::Dims("at least two classes are required".into()));
        }
        let widths = [
            self.input_dim,
            self.hidden,
            self.feat_dim,
            self.adapt_hidden,
            self.aligned_dim,
        ];
        if widths.contains(&0) {
            return Err(ModelError::Dims("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, ParamGroup)> {
        let mut out = vec![
            ("F.w0".to_string(), vec![self.input_dim, self.hidden], ParamGroup::Backbone),
            ("F.b0".to_string(), vec![1, self.hidden], ParamGroup::Backbone),
            ("F.w1".to_string(), vec![self.hidden, self.feat_dim], ParamGroup::Backbone),
            ("F.b1".to_string(), vec![1, self.feat_dim], ParamGroup::Backbone),
        ];
        for m in 0..self.sources {
            out.push((format!("A{m}.w0"), vec![self.feat_dim, self.adapt_hidden], ParamGroup::Head));
            out.push((format!("A{m}.b0"), vec![1, self.adapt_hidden], ParamGroup::Head));
            out.push((format!("A{m}.w1"), vec![self.adapt_hidden, self.aligned_dim], ParamGroup::Head));
            out.push((format!("A{m}.b1"), vec![1, self.aligned_dim], ParamGroup::Head));
            out.push((format!("C{m}.w"), vec![self.aligned_dim, self.classes], ParamGroup::Head));
            out.push((format!("C{m}.b"), vec![1, self.classes], ParamGroup::Head));
        }
        out.push(("u".to_string(), vec![1, self.sources], ParamGroup::Ensemble));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Shared extractor.
    Backbone,
    /// Aligned extractors and classifiers.
    Head,
    /// Ensemble logits.
    Ensemble,
}

const F_BASE: usize = 0;
const PER_SOURCE: usize = 6;
const HEAD_BASE: usize = 4;

/// All trainable parameters, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    dims: ModelDims,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Tensor>,
}

impl ModelState {
    /// Every weight, bias and ensemble logit set to zero.
    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        let layout = dims.layout();
        Ok(Self {
            dims,
            names: layout.iter().map(|(n, _, _)| n.clone()).collect(),
            groups: layout.iter().map(|(_, _, g)| *g).collect(),
            params: layout.iter().map(|(_, s, _)| Tensor::zeros(s)).collect(),
        })
    }

    /// Glorot-uniform weights, zero biases, zero ensemble logits.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self, ModelError> {
        let mut state = Self::zeros(dims)?;
        for (name, p) in state.names.iter().zip(state.params.iter_mut()) {
            let is_weight = name.contains(".w");
            if !is_weight {
                continue;
            }
            let (fan_in, fan_out) = (p.rows(), p.cols());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(state)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn ensemble_logits(&self) -> &Tensor {
        self.params.last().expect("ensemble logits")
    }

    pub fn set_ensemble_logits(&mut self, logits: &[f64]) -> Result<(), ModelError> {
        let u = self.params.last_mut().expect("ensemble logits");
        if logits.len() != u.numel() {
            return Err(ModelError::Dims(format!(
                "expected {} ensemble logits, got {}",
                u.numel(),
                logits.len()
            )));
        }
        u.data_mut().copy_from_slice(logits);
        Ok(())
    }

    /// Ensemble weights `softmax(u)`.
    pub fn ensemble_weights(&self) -> Vec<f64> {
        crate::numerics::softmax(self.ensemble_logits().data())
    }

    /// Places every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundModel {
            dims: self.dims,
            vars,
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                tensor: t.clone(),
            })
            .collect()
    }

    /// Rebuilds a model from named tensors; entries with unknown names are ignored.
    pub fn from_named(dims: ModelDims, entries: &[NamedTensor]) -> Result<Self, ModelError> {
        let mut state = Self::zeros(dims)?;
        for (name, slot) in state.names.iter().zip(state.params.iter_mut()) {
            let entry = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if entry.tensor.shape() != slot.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: entry.tensor.shape().to_vec(),
                });
            }
            *slot = entry.tensor.clone();
        }
        Ok(state)
    }

    /// Aligned features and source-head prediction for a source batch.
    pub fn forward_source(
        &self,
        x: &Tensor,
        m: usize,
        sample_ids: &[usize],
    ) -> Result<(Tensor, PredictionBatch), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (phi, p) = bound.forward_source(&mut tape, xv, m)?;
        Ok((
            tape.value(phi).clone(),
            PredictionBatch {
                probs: tape.value(p).clone(),
                domain: Domain::Source(m),
                head: Head::Source(m),
                sample_ids: sample_ids.to_vec(),
            },
        ))
    }

    /// Per-source target features and predictions plus the weighted prediction.
    pub fn forward_target(&self, x: &Tensor, sample_ids: &[usize]) -> Result<TargetOutputs, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let fwd = bound.forward_target(&mut tape, xv)?;
        let batch = |probs: Var, head| PredictionBatch {
            probs: tape.value(probs).clone(),
            domain: Domain::Target,
            head,
            sample_ids: sample_ids.to_vec(),
        };
        Ok(TargetOutputs {
            features: fwd.features.iter().map(|&v| tape.value(v).clone()).collect(),
            per_source: fwd
                .probs
                .iter()
                .enumerate()
                .map(|(m, &v)| batch(v, Head::Source(m)))
                .collect(),
            weighted: batch(fwd.weighted, Head::Weighted),
        })
    }
}

/// Value-level result of [`ModelState::forward_target`].
#[derive(Debug, Clone)]
pub struct TargetOutputs {
    pub features: Vec<Tensor>,
    pub per_source: Vec<PredictionBatch>,
    pub weighted: PredictionBatch,
}

impl TargetOutputs {
    /// Unweighted mean of the per-source predictions.
    pub fn average(&self) -> PredictionBatch {
        let m = self.per_source.len() as f64;
        let mut probs = Tensor::zeros(self.weighted.probs.shape());
        for p in &self.per_source {
            for (a, b) in probs.data_mut().iter_mut().zip(p.probs.data()) {
                *a += b / m;
            }
        }
        PredictionBatch {
            probs,
            domain: Domain::Target,
            head: Head::Average,
            sample_ids: self.weighted.sample_ids.clone(),
        }
    }
}

/// Which classifier output a prediction batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Source(usize),
    Weighted,
    Average,
}

/// Row-stochastic class probabilities for a batch.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub probs: Tensor,
    pub domain: Domain,
    pub head: Head,
    pub sample_ids: Vec<usize>,
}

/// Model parameters living on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    dims: ModelDims,
    vars: Vec<Var>,
}

/// Tape handles produced by [`BoundModel::forward_target`].
#[derive(Debug, Clone)]
pub struct TargetForward {
    pub features: Vec<Var>,
    pub probs: Vec<Var>,
    pub weighted: Var,
    pub weights: Var,
}

impl BoundModel {
    /// Wraps leaves already on a tape, in [`ModelState::names`] order.
    pub fn from_vars(dims: ModelDims, vars: Vec<Var>) -> Result<Self, ModelError> {
        let expected = dims.layout().len();
        if vars.len() != expected {
            return Err(ModelError::Dims(format!("expected {expected} parameter leaves, got {}", vars.len())));
        }
        Ok(Self { dims, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Result<Var, NumericsError> {
        let h = tape.matmul(x, self.vars[w])?;
        tape.add(h, self.vars[b])
    }

    /// Shared extractor: two tanh layers.
    pub fn shared(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let got = tape.value(x).cols();
        if got != self.dims.input_dim {
            return Err(ModelError::InputDim {
                expected: self.dims.input_dim,
                got,
            });
        }
        let h = self.linear(tape, x, F_BASE, F_BASE + 1)?;
        let h = tape.tanh(h);
        let h = self.linear(tape, h, F_BASE + 2, F_BASE + 3)?;
        Ok(tape.tanh(h))
    }

    /// Aligned features and probabilities of source head `m` from shared features.
    pub fn head(&self, tape: &mut Tape, feats: Var, m: usize) -> Result<(Var, Var), ModelError> {
        if m >= self.dims.sources {
            return Err(ModelError::SourceIndex {
                index: m,
                sources: self.dims.sources,
            });
        }
        let base = HEAD_BASE + m * PER_SOURCE;
        let h = self.linear(tape, feats, base, base + 1)?;
        let h = tape.relu(h);
        let h = self.linear(tape, h, base + 2, base + 3)?;
        let phi = tape.relu(h);
        let logits = self.linear(tape, phi, base + 4, base + 5)?;
        let probs = tape.row_softmax(logits)?;
        Ok((phi, probs))
    }

    pub fn forward_source(&self, tape: &mut Tape, x: Var, m: usize) -> Result<(Var, Var), ModelError> {
        let feats = self.shared(tape, x)?;
        self.head(tape, feats, m)
    }

    pub fn ensemble_weights(&self, tape: &mut Tape) -> Result<Var, ModelError> {
        let u = *self.vars.last().expect("ensemble logits");
        Ok(tape.row_softmax(u)?)
    }

    /// `Σ_m w_m · P_m` with `w = softmax(u)`.
    pub fn combine(&self, tape: &mut Tape, probs: &[Var]) -> Result<(Var, Var), ModelError> {
        let w = self.ensemble_weights(tape)?;
        let m_count = self.dims.sources;
        let mut acc: Option<Var> = None;
        for (m, &p) in probs.iter().enumerate() {
            let mut pick = Tensor::zeros(&[m_count, 1]);
            pick.set(m, 0, 1.0);
            let pick = tape.constant(pick);
            let wm = tape.matmul(w, pick)?;
            let term = tape.mul(p, wm)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let weighted = acc.ok_or_else(|| ModelError::Dims("no source heads".into()))?;
        Ok((weighted, w))
    }

    pub fn forward_target(&self, tape: &mut Tape, x: Var) -> Result<TargetForward, ModelError> {
        let feats = self.shared(tape, x)?;
        let mut features = Vec::with_capacity(self.dims.sources);
        let mut probs = Vec::with_capacity(self.dims.sources);
        for m in 0..self.dims.sources {
            let (phi, p) = self.head(tape, feats, m)?;
            features.push(phi);
            probs.push(p);
        }
        let (weighted, weights) = self.combine(tape, &probs)?;
        Ok(TargetForward {
            features,
            probs,
            weighted,
            weights,
        })
    }
}

/// Pseudo-class of each row: its argmax when the top probability exceeds
/// `tau`, otherwise `None`. Ties go to the lowest class index.
pub fn pseudo_label(probs: &Tensor, tau: f64) -> Vec<Option<usize>> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let d = crate::numerics::argmax(row);
            (row[d] > tau).then_some(d)
        })
        .collect()
}

/// One-hot encoding of `class` over `classes` entries.
pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}
