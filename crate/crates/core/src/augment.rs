//! Weak and strong perturbations of input vectors and their
//! hardness-controlled convex mix.
//!
//! Vector-space stand-ins for image augmentations:
//! weak = {small gaussian jitter, coordinate sign flips, coordinate
//! crop-mask}; strong = {large gaussian jitter, coordinate masking, global
//! rescaling, whole-vector inversion}. Ops run in that order and only
//! enabled ops consume random draws.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("mixing coefficient {0} outside [0, 1]")]
    Coefficient(f64),
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakPolicy {
    pub jitter_std: f64,
    pub sign_flip_prob: f64,
    pub crop_mask_prob: f64,
    pub jitter: bool,
    pub sign_flip: bool,
    pub crop_mask: bool,
}

impl Default for WeakPolicy {
    fn default() -> Self {
        Self {
            jitter_std: 0.05,
            sign_flip_prob: 0.0,
            crop_mask_prob: 0.0,
            jitter: true,
            sign_flip: true,
            crop_mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongPolicy {
    pub jitter_std: f64,
    pub mask_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub invert_prob: f64,
    pub jitter: bool,
    pub mask: bool,
    pub scale: bool,
    pub invert: bool,
}

impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            jitter_std: 0.5,
            mask_prob: 0.1,
            scale_min: 0.7,
            scale_max: 1.3,
            invert_prob: 0.05,
            jitter: true,
            mask: true,
            scale: true,
            invert: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
}

impl AugmentPolicy {
    /// Every op disabled on both branches.
    pub fn identity() -> Self {
        Self {
            weak: WeakPolicy {
                jitter: false,
                sign_flip: false,
                crop_mask: false,
                ..WeakPolicy::default()
            },
            strong: StrongPolicy {
                jitter: false,
                mask: false,
                scale: false,
                invert: false,
                ..StrongPolicy::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (w, s) = (&self.weak, &self.strong);
        let probs = [w.sign_flip_prob, w.crop_mask_prob, s.mask_prob, s.invert_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AugmentError::Policy("probabilities must lie in [0, 1]".into()));
        }
        if w.jitter_std < 0.0 || s.jitter_std <= w.jitter_std {
            return Err(AugmentError::Policy(
                "strong jitter must exceed weak jitter, which must be non-negative".into(),
            ));
        }
        if s.mask_prob < w.crop_mask_prob {
            return Err(AugmentError::Policy(
                "strong mask probability must be at least the weak crop-mask probability".into(),
            ));
        }
        if !(s.scale_min > 0.0 && s.scale_min <= s.scale_max) {
            return Err(AugmentError::Policy("scale range must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

fn jitter<R: Rng + ?Sized>(x: &mut [f64], std: f64, rng: &mut R) {
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += std * z;
    }
}

fn per_coordinate<R: Rng + ?Sized>(x: &mut [f64], prob: f64, rng: &mut R, f: impl Fn(f64) -> f64) {
    for v in x.iter_mut() {
        if rng.random::<f64>() < prob {
            *v = f(*v);
        }
    }
}

pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let p = &policy.weak;
    let mut out = x.to_vec();
    if p.jitter {
        jitter(&mut out, p.jitter_std, rng);
    }
    if p.sign_flip {
        per_coordinate(&mut out, p.sign_flip_prob, rng, |v| -v);
    }
    if p.crop_mask {
        per_coordinate(&mut out, p.crop_mask_prob, rng, |_| 0.0);
    }
    out
}

pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let p = &policy.strong;
    let mut out = x.to_vec();
    if p.jitter {
        jitter(&mut out, p.jitter_std, rng);
    }
    if p.mask {
        per_coordinate(&mut out, p.mask_prob, rng, |_| 0.0);
    }
    if p.scale {
        let u: f64 = rng.random();
        let factor = p.scale_min + (p.scale_max - p.scale_min) * u;
        out.iter_mut().for_each(|v| *v *= factor);
    }
    if p.invert && rng.random::<f64>() < p.invert_prob {
        out.iter_mut().for_each(|v| *v = -*v);
    }
    out
}

/// `h · weak(x) + (1 - h) · strong(x)`, weak branch drawn first.
pub fn adaptive_augment<R: Rng + ?Sized>(
    x: &[f64],
    h: f64,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<f64>, AugmentError> {
    if !(0.0..=1.0).contains(&h) {
        return Err(AugmentError::Coefficient(h));
    }
    let weak = weak_augment(x, policy, rng);
    let strong = strong_augment(x, policy, rng);
    Ok(mix(&weak, &strong, h))
}

/// Pointwise convex combination `h·a + (1-h)·b`.
pub fn mix(a: &[f64], b: &[f64], h: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&w, &s)| h * w + (1.0 - h) * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const X: [f64; 4] = [0.5, -1.0, 2.0, 0.25];

    #[test]
    fn disabled_ops_are_identity() {
        let policy = AugmentPolicy::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(weak_augment(&X, &policy, &mut rng), X.to_vec());
        assert_eq!(strong_augment(&X, &policy, &mut rng), X.to_vec());
        for h in [0.0, 0.3, 1.0] {
            assert_eq!(adaptive_augment(&X, h, &policy, &mut rng).unwrap(), X.to_vec());
        }
    }

    #[test]
    fn weak_jitter_replays_rng_stream() {
        let mut policy = AugmentPolicy::identity();
        policy.weak.jitter = true;
        policy.weak.jitter_std = 0.01;
        let out = weak_augment(&X, &policy, &mut ChaCha8Rng::seed_from_u64(42));
        let mut replay = ChaCha8Rng::seed_from_u64(42);
        for (o, x) in out.iter().zip(X) {
            let z: f64 = replay.sample(StandardNormal);
            assert_eq!(*o, x + 0.01 * z);
        }
        assert_eq!(out, weak_augment(&X, &policy, &mut ChaCha8Rng::seed_from_u64(42)));
    }

    #[test]
    fn certain_inversion_negates() {
        let mut policy = AugmentPolicy::identity();
        policy.strong.invert = true;
        policy.strong.invert_prob = 1.0;
        let out = strong_augment(&X, &policy, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out, X.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn endpoints_select_branches() {
        let policy = AugmentPolicy::default();
        let seed = 17;
        let (w, s) = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = weak_augment(&X, &policy, &mut rng);
            (w, strong_augment(&X, &policy, &mut rng))
        };
        let one = adaptive_augment(&X, 1.0, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let zero = adaptive_augment(&X, 0.0, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(one, w);
        assert_eq!(zero, s);
    }

    #[test]
    fn rejects_out_of_range_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugmentPolicy::default();
        assert_eq!(
            adaptive_augment(&X, 1.5, &p, &mut rng),
            Err(AugmentError::Coefficient(1.5))
        );
        assert!(adaptive_augment(&X, -0.1, &p, &mut rng).is_err());
    }

    #[test]
    fn default_policy_is_valid() {
        AugmentPolicy::default().validate().unwrap();
        let mut bad = AugmentPolicy::default();
        bad.strong.jitter_std = bad.weak.jitter_std;
        assert!(bad.validate().is_err());
    }
}
