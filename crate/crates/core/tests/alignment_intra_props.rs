use a3mda::alignment::{inter_loss, mmd2, uniform_group_weights, wc_mmd2, FeatureBatch, GramSet, KernelSpec};
use a3mda::intra::{build_pcm, build_plm, intra_loss, one_hot_rows, select_hard_targets, select_random_targets};
use a3mda::numerics::{softmax, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(rows: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(|n| prop::collection::vec(-2.0f64..2.0, n * 3).prop_map(move |d| Tensor::matrix(n, 3, d)))
}

fn labels(n: usize, classes: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    prop::collection::vec(prop::option::weighted(0.8, 0..classes), n)
}

fn mmd_value(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> f64 {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let v = mmd2(&mut tape, xv, yv, kernel).unwrap();
    tape.scalar_value(v)
}

fn permute(t: &Tensor, order: &[usize]) -> Tensor {
    Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn mmd_is_bounded_and_symmetric(x in features(2..9), y in features(2..9), sigma in 0.1f64..5.0) {
        let kernel = KernelSpec::single(sigma);
        let xy = mmd_value(&x, &y, &kernel);
        let yx = mmd_value(&y, &x, &kernel);
        prop_assert!((-1e-12..=4.0).contains(&xy));
        prop_assert!((xy - yx).abs() <= 1e-12);
    }

    #[test]
    fn mmd_ignores_row_order(x in features(2..9), y in features(2..9), seed in any::<u64>()) {
        let kernel = KernelSpec::median_heuristic(&x, &y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ox: Vec<usize> = (0..x.rows()).collect();
        let mut oy: Vec<usize> = (0..y.rows()).collect();
        rand::seq::SliceRandom::shuffle(ox.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(oy.as_mut_slice(), &mut rng);
        let a = mmd_value(&x, &y, &kernel);
        let b = mmd_value(&permute(&x, &ox), &permute(&y, &oy), &kernel);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn clustered_terms_are_bounded_and_inter_loss_adds_up(
        (x, sl) in features(3..10).prop_flat_map(|x| { let n = x.rows(); (Just(x), labels(n, 3)) }),
        (y, tl) in features(3..10).prop_flat_map(|y| { let n = y.rows(); (Just(y), labels(n, 3)) }),
    ) {
        let kernel = KernelSpec::median_heuristic(&x, &y);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let source = FeatureBatch { features: xv, weights: uniform_group_weights(&sl), labels: sl };
        let target = FeatureBatch { features: yv, weights: uniform_group_weights(&tl), labels: tl };
        let grams = GramSet::build(&mut tape, xv, yv, &kernel).unwrap();
        let wc = wc_mmd2(&mut tape, &grams, &source, &target).unwrap();
        for term in &wc.terms {
            let a = tape.scalar_value(term.attract);
            prop_assert!((-1e-12..=4.0).contains(&a), "attract {a}");
            if let Some(r) = term.repel {
                let r = tape.scalar_value(r);
                prop_assert!((-1e-12..=4.0).contains(&r), "repel {r}");
            }
        }
        let inter = inter_loss(&mut tape, &source, &target, &kernel, true, true).unwrap();
        let parts = tape.scalar_value(inter.mmd) + inter.wc.as_ref().map_or(0.0, |w| tape.scalar_value(w.loss));
        prop_assert!((tape.scalar_value(inter.total) - parts).abs() <= 1e-12);
        prop_assert!((tape.scalar_value(inter.mmd) - mmd_value(&x, &y, &kernel)).abs() <= 1e-12);
    }

    #[test]
    fn unlabeled_rows_are_never_selected(
        pseudo in labels(12, 4),
        hardness in prop::collection::vec(0.0f64..1.0, 12),
        ratio in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let ids: Vec<usize> = (0..12).collect();
        let hard = select_hard_targets(&hardness, &pseudo, &ids, ratio).unwrap();
        let random = select_random_targets(&pseudo, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let eligible = pseudo.iter().flatten().count();
        for sel in [&hard, &random] {
            prop_assert!(sel.indices.iter().all(|&i| pseudo[i].is_some()));
            prop_assert_eq!(sel.len(), if eligible == 0 { 0 } else { ((ratio * eligible as f64).floor() as usize).max(1) });
            for (&i, &l) in sel.indices.iter().zip(&sel.labels) {
                prop_assert_eq!(pseudo[i], Some(l));
            }
        }
    }
}

/// Selection, label matrix, contrastive matrix and loss written out with
/// plain loops over rows.
fn dense_intra(
    hardness: &[f64],
    pseudo: &[Option<usize>],
    ratio: f64,
    anchors: &[Vec<f64>],
    views: &[Vec<f64>],
    tem: f64,
) -> f64 {
    let mut rows: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i].is_some()).collect();
    // Stable sort by descending hardness keeps the lower id first on ties.
    rows.sort_by(|&i, &j| hardness[j].partial_cmp(&hardness[i]).unwrap());
    let keep = ((ratio * rows.len() as f64).floor() as usize).max(1);
    rows.truncate(keep);
    let n = rows.len();
    let mut total = 0.0;
    for a in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|b| anchors[rows[a]].iter().zip(&views[rows[b]]).map(|(p, q)| p * q).sum::<f64>() / tem)
            .collect();
        let pcm = softmax(&logits);
        for b in 0..n {
            let plm = if pseudo[rows[a]] == pseudo[rows[b]] { 1.0 } else { 0.0 };
            total += (pcm[b] - plm).abs();
        }
    }
    total / (n * n) as f64
}

#[test]
fn intra_pipeline_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (n, k, tem) = (16, 4, 0.15);
    for _ in 0..200 {
        let random_probs = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| softmax(&(0..k).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>())).collect()
        };
        let anchors = random_probs(&mut rng);
        let views = random_probs(&mut rng);
        let pseudo: Vec<Option<usize>> =
            (0..n).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..k))).collect();
        if pseudo.iter().all(Option::is_none) {
            continue;
        }
        let hardness: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
        let ratio = rng.random_range(0.1..=1.0);

        let ids: Vec<usize> = (0..n).collect();
        let sel = select_hard_targets(&hardness, &pseudo, &ids, ratio).unwrap();
        let plm = build_plm(&one_hot_rows(&sel.labels, k)).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&sel.indices.iter().map(|&i| anchors[i].clone()).collect::<Vec<_>>()));
        let v = tape.constant(Tensor::from_rows(&sel.indices.iter().map(|&i| views[i].clone()).collect::<Vec<_>>()));
        let pcm = build_pcm(&mut tape, a, v, tem).unwrap();
        let loss = intra_loss(&mut tape, &plm, pcm).unwrap();

        let expected = dense_intra(&hardness, &pseudo, ratio, &anchors, &views, tem);
        let got = tape.scalar_value(loss);
        assert!((got - expected).abs() <= 1e-10, "{got} vs {expected}");
    }
}

#[test]
fn disjoint_classes_skip_the_clustered_term() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    let y = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 1.0]]));
    let grams = GramSet::build(&mut tape, x, y, &KernelSpec::single(1.0)).unwrap();
    let sl = vec![Some(0), Some(0)];
    let tl = vec![Some(1), None];
    let source = FeatureBatch { features: x, weights: uniform_group_weights(&sl), labels: sl };
    let target = FeatureBatch { features: y, weights: uniform_group_weights(&tl), labels: tl };
    let wc = wc_mmd2(&mut tape, &grams, &source, &target).unwrap();
    assert!(wc.skipped);
    assert_eq!(tape.scalar_value(wc.loss), 0.0);
}
