use crate::model::ParamGroup;
use crate::numerics::Tensor;

use super::config::Optim;

/// `lr0 / (1 + 10p)^0.75`.
pub fn annealed_lr(lr0: f64, p: f64) -> f64 {
    lr0 / (1.0 + 10.0 * p).powf(0.75)
}

/// SGD with heavy-ball momentum and one learning rate per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub settings: Optim,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(settings: Optim, params: &[Tensor]) -> Self {
        Self {
            settings,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Current rate of each parameter group.
    pub fn learning_rate(&self, group: ParamGroup, progress: f64) -> f64 {
        let s = &self.settings;
        let lr0 = match group {
            ParamGroup::Backbone => s.lr_backbone,
            ParamGroup::Head => s.lr_heads,
            ParamGroup::Ensemble => s.lr_ensemble,
        };
        if s.anneal {
            annealed_lr(lr0, progress)
        } else {
            lr0
        }
    }

    /// `v ← μv + g; θ ← θ - lr·v`.
    pub fn step(&mut self, params: &mut [Tensor], groups: &[ParamGroup], grads: &[Tensor], progress: f64) {
        let mu = self.settings.momentum;
        let rates: Vec<f64> = groups.iter().map(|&g| self.learning_rate(g, progress)).collect();
        for (((p, v), g), lr) in params.iter_mut().zip(&mut self.velocity).zip(grads).zip(rates) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}
