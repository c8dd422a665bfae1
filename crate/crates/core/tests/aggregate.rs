use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xagg_core::aggregate::{
    agg_mean, agg_var, decompose_mse, epsilon_from_dataset, method_pairs, pairwise_stacks, synthetic_cases,
    AggVarConfig, HeatmapStack, SyntheticTruthCase,
};
use xagg_core::heatmap::{Heatmap, Provenance};

fn hm(h: usize, w: usize, values: &[f64]) -> Heatmap {
    Heatmap::new(h, w, values.to_vec(), Provenance::new("m")).unwrap()
}

fn stack(maps: &[&[f64]], h: usize, w: usize) -> HeatmapStack {
    HeatmapStack::new(
        maps.iter().map(|v| hm(h, w, v)).collect(),
        (0..maps.len()).map(|j| format!("m{j}")).collect(),
    )
    .unwrap()
}

fn random_stack(rng: &mut ChaCha8Rng, j: usize, pixels: usize) -> HeatmapStack {
    let maps: Vec<Heatmap> = (0..j)
        .map(|_| hm(1, pixels, &(0..pixels).map(|_| rng.random::<f64>()).collect::<Vec<_>>()).normalized(true))
        .collect();
    HeatmapStack::new(maps, (0..j).map(|k| format!("m{k}")).collect()).unwrap()
}

#[test]
fn agg_mean_examples() {
    let a = [0.1, 0.2, 0.3, 0.4];
    let s = stack(&[&a, &a, &a], 2, 2);
    for (x, y) in agg_mean(&s).values().iter().zip(&a) {
        assert!((x - y).abs() < 1e-15);
    }
    let s = stack(&[&[0.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]], 2, 2);
    assert_eq!(agg_mean(&s).values(), &[0.5, 0.5, 0.0, 0.0]);
    assert_eq!(agg_mean(&s).provenance.method, "agg-mean");
}

#[test]
fn agg_mean_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_stack(&mut rng, 5, 64);
    let ours = agg_mean(&s);
    for p in 0..64 {
        let mut total = 0.0;
        for j in 0..5 {
            total += s.maps()[j].values()[p];
        }
        assert_eq!(ours.values()[p], total / 5.0);
    }
}

#[test]
fn stack_validation() {
    let a = hm(2, 2, &[0.25; 4]);
    assert!(HeatmapStack::new(vec![a.clone()], vec!["a".into()]).is_err());
    assert!(HeatmapStack::new(vec![a.clone(), hm(1, 4, &[0.25; 4])], vec!["a".into(), "b".into()]).is_err());
    assert!(HeatmapStack::new(vec![a.clone(), hm(2, 2, &[0.5; 4])], vec!["a".into(), "b".into()]).is_err());
    assert!(HeatmapStack::new(vec![a.clone(), a.clone()], vec!["a".into()]).is_err());
    let raw = HeatmapStack::normalize(&[hm(2, 2, &[1.0, 3.0, 0.0, 0.0]), hm(2, 2, &[-1.0, 1.0, 1.0, 1.0])], true).unwrap();
    assert_eq!(raw.maps()[0].values(), &[0.25, 0.75, 0.0, 0.0]);
    assert_eq!(raw.maps()[1].values(), &[0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn agg_var_examples() {
    let a = [0.1, 0.2, 0.3, 0.4];
    let same = agg_var(&stack(&[&a, &a], 2, 2), &AggVarConfig::new(0.01).unwrap()).unwrap();
    for (x, y) in same.values().iter().zip(&a) {
        assert!((x - y).abs() < 1e-15);
    }
    let pair = agg_var(&stack(&[&[0.2, 0.8], &[0.8, 0.2]], 1, 2), &AggVarConfig::new(0.3).unwrap()).unwrap();
    assert!((pair.values()[0] - 0.5).abs() < 1e-15 && (pair.values()[1] - 0.5).abs() < 1e-15);
    assert!(AggVarConfig::new(0.0).is_err());
    assert!(agg_var(&stack(&[&a, &a], 2, 2), &AggVarConfig { epsilon: -1.0, multiplier: None }).is_err());
}

#[test]
fn agg_var_suppresses_disagreement() {
    // Pixel 0: both methods agree on 0.3. Pixel 1: they split 0.1 / 0.5.
    let s = stack(&[&[0.3, 0.1, 0.6], &[0.3, 0.5, 0.2]], 1, 3);
    let mean = agg_mean(&s);
    let var = agg_var(&s, &AggVarConfig::new(0.05).unwrap()).unwrap();
    let ratio = |m: &Heatmap| m.values()[1] / m.values()[0];
    assert!(ratio(&var) < ratio(&mean));
    // Hand formula: σ = (0, 0.2, 0.2); values μ/(σ+ε) = (6, 1.2, 1.6) before scaling.
    let expected = [6.0 / 8.8, 1.2 / 8.8, 1.6 / 8.8];
    for (x, y) in var.values().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn epsilon_examples() {
    let cfg = epsilon_from_dataset(&[vec![0.02; 9]], 10.0).unwrap();
    assert!((cfg.epsilon - 0.2).abs() < 1e-15);
    assert_eq!(cfg.multiplier, Some(10.0));
    assert!(epsilon_from_dataset(&[vec![0.02; 9]], 0.0).is_err());
    assert!(epsilon_from_dataset(&[], 10.0).is_err());
    assert!(epsilon_from_dataset(&[vec![0.0; 4]], 10.0).is_err());
    let cfg = epsilon_from_dataset(&[vec![0.01; 4], vec![0.03; 4]], 1.0).unwrap();
    assert!((cfg.epsilon - 0.02).abs() < 1e-15);
}

#[test]
fn decomposition_examples() {
    let truth = vec![0.1, 0.2, 0.3, 0.4];
    let exact = SyntheticTruthCase {
        truth: truth.clone(),
        observations: vec![truth.clone(); 3],
        noise: "none".into(),
    };
    let r = decompose_mse(&[exact]).unwrap();
    assert_eq!(r.mean_mse, 0.0);
    assert!(r.aggregate_mse < 1e-30 && r.variance < 1e-30);

    let delta = [0.05, -0.02, 0.01, 0.03];
    let sym = SyntheticTruthCase {
        truth: truth.clone(),
        observations: vec![
            truth.iter().zip(&delta).map(|(t, d)| t + d).collect(),
            truth.iter().zip(&delta).map(|(t, d)| t - d).collect(),
        ],
        noise: "±δ".into(),
    };
    let r = decompose_mse(&[sym]).unwrap();
    let norm = delta.iter().map(|d| d * d).sum::<f64>() / 4.0;
    assert!(r.aggregate_mse < 1e-30);
    assert!((r.mean_mse - norm).abs() < 1e-15);
    assert!((r.variance - norm).abs() < 1e-15);
    assert!(decompose_mse(&[]).is_err());
    let single = SyntheticTruthCase {
        truth: truth.clone(),
        observations: vec![truth],
        noise: "none".into(),
    };
    assert!(decompose_mse(&[single]).is_err());
}

#[test]
fn decomposition_on_random_cases() {
    let cases = synthetic_cases(100, 49, 5, 0.01, 7).unwrap();
    for c in &cases {
        let r = decompose_mse(std::slice::from_ref(c)).unwrap();
        assert!(r.identity_residual().abs() < 1e-10);
        assert!(r.aggregate_mse < r.mean_mse);
    }
    let all = decompose_mse(&cases).unwrap();
    assert!(all.identity_residual().abs() < 1e-10);
    assert_eq!(all.per_method_mse.len(), 5);
}

#[test]
fn pair_enumeration() {
    assert_eq!(method_pairs(6).len(), 15);
    assert_eq!(method_pairs(2), vec![(0, 1)]);
    assert_eq!(method_pairs(4), vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_stack(&mut rng, 4, 9);
    let pairs = pairwise_stacks(&s);
    assert_eq!(pairs.len(), 6);
    assert_eq!(pairs[4].methods(), &["m1".to_string(), "m3".to_string()]);
    assert_eq!(pairs, pairwise_stacks(&s));
}

proptest! {
    #[test]
    fn aggregates_are_normalized_and_order_free(seed in any::<u64>(), j in 2usize..7, eps in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_stack(&mut rng, j, 25);
        let cfg = AggVarConfig::new(eps).unwrap();
        let (m, v) = (agg_mean(&s), agg_var(&s, &cfg).unwrap());
        for out in [&m, &v] {
            prop_assert!((out.sum() - 1.0).abs() < 1e-9);
            prop_assert!(out.values().iter().all(|x| *x >= 0.0));
        }
        let rev: Vec<usize> = (0..j).rev().collect();
        let r = s.select(&rev).unwrap();
        for (a, b) in agg_mean(&r).values().iter().zip(m.values()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in agg_var(&r, &cfg).unwrap().values().iter().zip(v.values()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn agg_var_tends_to_agg_mean(seed in any::<u64>(), j in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_stack(&mut rng, j, 25);
        let max_sigma = s.std().into_iter().fold(0.0, f64::max);
        let v = agg_var(&s, &AggVarConfig::new(1e6 * max_sigma.max(1e-12)).unwrap()).unwrap();
        for (a, b) in v.values().iter().zip(agg_mean(&s).values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decomposition_identity_and_inequality(
        truth in prop::collection::vec(-1.0f64..1.0, 1..30),
        noise in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 30), 2..6),
    ) {
        let n = truth.len();
        let observations: Vec<Vec<f64>> = noise.iter().map(|d| truth.iter().zip(d).map(|(t, e)| t + e).collect()).collect();
        let identical = observations.iter().all(|o| o == &observations[0]);
        let r = decompose_mse(&[SyntheticTruthCase { truth, observations, noise: "proptest".into() }]).unwrap();
        prop_assert!(r.identity_residual().abs() < 1e-10);
        prop_assert!(r.variance >= 0.0);
        prop_assert!(r.aggregate_mse <= r.mean_mse + 1e-15);
        if identical {
            prop_assert!(r.variance < 1e-30);
        } else {
            prop_assert!(r.aggregate_mse < r.mean_mse, "n = {}", n);
        }
    }

    #[test]
    fn equal_maps_give_equality(values in prop::collection::vec(-1.0f64..1.0, 1..20), j in 2usize..5) {
        let truth: Vec<f64> = values.iter().map(|v| v * 0.5).collect();
        let r = decompose_mse(&[SyntheticTruthCase { truth, observations: vec![values; j], noise: "copies".into() }]).unwrap();
        prop_assert!((r.aggregate_mse - r.mean_mse).abs() < 1e-15);
        prop_assert!(r.variance < 1e-30);
    }
}
