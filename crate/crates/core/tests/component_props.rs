use a3mda::augment::{adaptive_augment, mix, strong_augment, weak_augment, AugmentPolicy};
use a3mda::hardness::{basic_ahm, comparative_ahm, smooth_ahm};
use a3mda::model::{pseudo_label, ModelDims, ModelState};
use a3mda::numerics::{softmax, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, k).prop_map(|logits| softmax(&logits))
}

fn dims() -> ModelDims {
    ModelDims {
        input_dim: 3,
        hidden: 8,
        feat_dim: 6,
        adapt_hidden: 5,
        aligned_dim: 4,
        classes: 4,
        sources: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weighted_prediction_is_row_stochastic(
        seed in any::<u64>(),
        logits in prop::collection::vec(-3.0f64..3.0, 3),
        x in prop::collection::vec(-3.0f64..3.0, 15),
    ) {
        let mut model = ModelState::init(dims(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        model.set_ensemble_logits(&logits).unwrap();
        let out = model.forward_target(&Tensor::matrix(5, 3, x), &[0, 1, 2, 3, 4]).unwrap();
        let w = model.ensemble_weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..5 {
            let row = out.weighted.probs.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &pj) in row.iter().enumerate() {
                let manual: f64 = (0..3).map(|m| w[m] * out.per_source[m].probs.get(i, j)).sum();
                prop_assert!((pj - manual).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shifting_ensemble_logits_changes_nothing(
        seed in any::<u64>(),
        logits in prop::collection::vec(-3.0f64..3.0, 3),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 - 6.0) / 3.0).collect());
        let mut model = ModelState::init(dims(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        model.set_ensemble_logits(&logits).unwrap();
        let before = model.forward_target(&x, &[0, 1, 2, 3]).unwrap().weighted.probs;
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        model.set_ensemble_logits(&shifted).unwrap();
        let after = model.forward_target(&x, &[0, 1, 2, 3]).unwrap().weighted.probs;
        prop_assert_eq!(before.row_argmax(), after.row_argmax());
        for (a, b) in before.data().iter().zip(after.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pseudo_label_rate_falls_with_threshold(
        rows in prop::collection::vec(simplex(4), 1..20),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let probs = Tensor::from_rows(&rows);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let count = |tau| pseudo_label(&probs, tau).iter().flatten().count();
        prop_assert!(count(hi) <= count(lo));
        for (i, l) in pseudo_label(&probs, lo).iter().enumerate() {
            if let Some(c) = l {
                prop_assert_eq!(*c, probs.row_argmax()[i]);
            }
        }
    }

    #[test]
    fn basic_hardness_bounds(p in simplex(5)) {
        let z = a3mda::numerics::argmax(&p);
        let omega = basic_ahm(&p, z).unwrap();
        let top = p[z];
        prop_assert!((0.0..1.0).contains(&omega));
        prop_assert!(omega <= 1.0 - top + 1e-12);
    }

    #[test]
    fn smoothing_has_its_fixed_point_and_contracts(
        omega in 0.0f64..1.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        beta in 0.0f64..1.0,
    ) {
        prop_assert!((smooth_ahm(omega, Some(omega), beta) - omega).abs() <= 1e-15);
        let gap = (smooth_ahm(omega, Some(a), beta) - smooth_ahm(omega, Some(b), beta)).abs();
        prop_assert!(gap <= beta * (a - b).abs() + 1e-15);
    }

    #[test]
    fn comparative_hardness_preserves_order(values in prop::collection::vec(0.001f64..1.0, 1..30)) {
        let c = comparative_ahm(&values, None).unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(c[i] <= c[j]);
                }
            }
        }
    }

    #[test]
    fn adaptive_mix_is_coordinatewise_convex(
        x in prop::collection::vec(-3.0f64..3.0, 1..6),
        h in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let policy = AugmentPolicy::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = weak_augment(&x, &policy, &mut r);
        let s = strong_augment(&x, &policy, &mut r);
        let a = adaptive_augment(&x, h, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..x.len() {
            let (lo, hi) = if w[i] <= s[i] { (w[i], s[i]) } else { (s[i], w[i]) };
            prop_assert!(a[i] >= lo - 1e-12 && a[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn distance_to_weak_branch_shrinks_with_hardness(
        w in prop::collection::vec(-3.0f64..3.0, 4),
        s in prop::collection::vec(-3.0f64..3.0, 4),
        h1 in 0.0f64..=1.0,
        h2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
        let dist = |h| {
            mix(&w, &s, h).iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        prop_assert!(dist(hi) <= dist(lo) + 1e-12);
    }

    #[test]
    fn zero_magnitude_policy_is_the_identity(
        x in prop::collection::vec(-3.0f64..3.0, 1..6),
        h in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let out = adaptive_augment(&x, h, &AugmentPolicy::identity(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), x.len());
        for (a, b) in out.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn coefficient_outside_unit_interval_is_rejected() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(adaptive_augment(&[1.0], 1.5, &AugmentPolicy::default(), &mut r).is_err());
    assert!(adaptive_augment(&[1.0], -0.1, &AugmentPolicy::default(), &mut r).is_err());
}
