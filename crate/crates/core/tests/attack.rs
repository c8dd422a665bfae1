use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xagg_core::attack::{
    attack, attack_blank_region, centered_square, loss_and_gradient, transfer_matrix, AttackConfig, Explainer,
    LossSpec, Objective, Optimizer,
};
use xagg_core::evaluate::Similarity;
use xagg_core::explain::Method;
use xagg_core::heatmap::{Heatmap, Provenance};
use xagg_core::model::build_small_cnn;
use xagg_core::tensor::{Conv2d, Dense, Graph, ImageTensor, Layer, LrpEpsilon, Nonlinearity, Shape};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// conv(2, 3×3) → SoftPlus → pool → dense(6) → SoftPlus → dense(3) on 1×8×8.
fn softplus_net(seed: u64, beta: f64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Graph::new(
        Shape::new(1, 8, 8),
        vec![
            Layer::Conv2d(Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                weight: Arc::new(rand_vec(&mut rng, 18, 0.8)),
                bias: Arc::new(rand_vec(&mut rng, 2, 0.2)),
            }),
            Layer::SoftPlus { beta },
            Layer::MaxPool2d { size: 2 },
            Layer::Flatten,
            Layer::Dense(Dense {
                inputs: 18,
                outputs: 6,
                weight: Arc::new(rand_vec(&mut rng, 108, 0.8)),
                bias: Arc::new(rand_vec(&mut rng, 6, 0.2)),
            }),
            Layer::SoftPlus { beta },
            Layer::Dense(Dense {
                inputs: 6,
                outputs: 3,
                weight: Arc::new(rand_vec(&mut rng, 18, 1.0)),
                bias: Arc::new(rand_vec(&mut rng, 3, 0.2)),
            }),
        ],
    )
    .unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> ImageTensor {
    ImageTensor::with_range(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect(), 0.0, 1.0).unwrap()
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Heatmap {
    Heatmap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect(), Provenance::new("t")).unwrap().normalized(true)
}

#[test]
fn attack_loss_gradient_matches_finite_differences() {
    let explainers: [&[Method]; 5] = [
        &[Method::Sm],
        &[Method::Gb],
        &[Method::Lrp],
        &[Method::Sm, Method::Gb, Method::Lrp],
        &[Method::Sm, Method::Lrp],
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let graph = softplus_net(seed, 2.0 + seed as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random_image(&mut rng, Shape::new(1, 8, 8));
        let members = explainers[seed as usize % explainers.len()];
        let objective = if seed % 2 == 0 {
            Objective::Target(random_target(&mut rng, 8, 8))
        } else {
            Objective::BlankRegion(centered_square(8, 8, 4))
        };
        let reference: Vec<f64> = graph.logits(&x).unwrap().iter().map(|l| l + 0.3).collect();
        let class = rng.random_range(0..3);
        let spec = LossSpec {
            members,
            class,
            objective: &objective,
            reference_logits: &reference,
            explanation_weight: 1.0,
            output_weight: 0.01,
            lrp: LrpEpsilon::Absolute(0.05),
        };
        let (_, grad) = loss_and_gradient(&graph, x.data(), &spec).unwrap();
        let h = 1e-6;
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..64 {
            let mut p = x.data().to_vec();
            let mut m = x.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let fp = loss_and_gradient(&graph, &p, &spec).unwrap().0.total;
            let fm = loss_and_gradient(&graph, &m, &spec).unwrap().0.total;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / scale.max(1e-12);
            worst = worst.max(err);
            assert!(err < 1e-3, "seed {seed} pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }
    assert!(worst < 1e-3);
}

#[test]
fn relu_graph_is_rejected_by_the_loss() {
    let graph = softplus_net(0, 5.0).substitute_nonlinearity(Nonlinearity::Relu);
    let x = ImageTensor::filled(Shape::new(1, 8, 8), 0.5);
    let objective = Objective::BlankRegion(vec![true; 64]);
    let spec = LossSpec {
        members: &[Method::Sm],
        class: 0,
        objective: &objective,
        reference_logits: &[0.0; 3],
        explanation_weight: 1.0,
        output_weight: 0.0,
        lrp: LrpEpsilon::Absolute(0.0),
    };
    assert!(loss_and_gradient(&graph, x.data(), &spec).is_err());
}

fn small_relu_model(seed: u64) -> Graph {
    build_small_cnn(Shape::new(1, 10, 10), 3).compile(seed).unwrap()
}

fn short(explainer: Explainer, iterations: usize) -> AttackConfig {
    AttackConfig {
        explainer,
        iterations,
        lr: 1e-2,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_is_a_no_op() {
    let g = small_relu_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, Shape::new(1, 10, 10));
    let t = random_target(&mut rng, 10, 10);
    for e in [Explainer::Single(Method::Sm), Explainer::Single(Method::Lrp), Explainer::default_aggregate()] {
        let r = attack(&g, &x, &t, &short(e, 0)).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.input_mse, 0.0);
        assert!(r.label_preserved);
        assert_eq!(r.metrics.len(), 3);
        assert!(r.metrics.iter().all(|m| m.diff == 0.0));
        let b = attack_blank_region(&g, &x, &centered_square(10, 10, 5), &short(r.explainer.clone(), 0)).unwrap();
        assert_eq!(b.preserved, 1.0);
    }
}

#[test]
fn linear_model_explanations_cannot_move() {
    let shape = Shape::new(1, 6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new(
        shape,
        vec![
            Layer::Flatten,
            Layer::Dense(Dense {
                inputs: 36,
                outputs: 2,
                weight: Arc::new(rand_vec(&mut rng, 72, 1.0)),
                bias: Arc::new(vec![0.0; 2]),
            }),
        ],
    )
    .unwrap();
    let x = random_image(&mut rng, shape);
    let t = random_target(&mut rng, 6, 6);
    let r = attack(&g, &x, &t, &short(Explainer::Single(Method::Sm), 20)).unwrap();
    assert_eq!(r.trace.len(), 21);
    for m in &r.metrics {
        assert!(m.diff.abs() < 1e-15, "{m:?}");
    }
}

#[test]
fn iterates_stay_in_range_and_loss_decreases() {
    let g = small_relu_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, Shape::new(1, 10, 10));
    let t = random_target(&mut rng, 10, 10);
    for e in [Explainer::Single(Method::Gb), Explainer::default_aggregate()] {
        let cfg = AttackConfig {
            beta_start: 5.0,
            beta_end: 5.0,
            ..short(e, 40)
        };
        let r = attack(&g, &x, &t, &cfg).unwrap();
        assert_eq!(r.trace.len(), 41);
        assert!(r.trace.iter().all(|v| v.is_finite()));
        assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.trace[40] < r.trace[0], "{:?}", r.trace);
        let again = attack(&g, &x, &t, &cfg).unwrap();
        assert_eq!(again.x_adv, r.x_adv);
    }
    let gd = AttackConfig {
        optimizer: Optimizer::GradientDescent,
        ..short(Explainer::Single(Method::Sm), 3)
    };
    assert_eq!(attack(&g, &x, &t, &gd).unwrap().trace.len(), 4);
}

#[test]
fn full_mask_blank_region_is_degenerate() {
    let g = small_relu_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_image(&mut rng, Shape::new(1, 10, 10));
    let r = attack_blank_region(&g, &x, &[true; 100], &short(Explainer::Single(Method::Sm), 10)).unwrap();
    assert!((r.preserved - 1.0).abs() < 1e-12);
    assert!(attack_blank_region(&g, &x, &[false; 100], &short(Explainer::Single(Method::Sm), 1)).is_err());
}

#[test]
fn centered_square_geometry() {
    let m = centered_square(28, 28, 14);
    assert_eq!(m.iter().filter(|v| **v).count(), 196);
    assert!(m[7 * 28 + 7] && m[20 * 28 + 20] && !m[6 * 28 + 7] && !m[21 * 28 + 20]);
}

#[test]
fn explainer_parsing() {
    assert_eq!("sm".parse::<Explainer>().unwrap(), Explainer::Single(Method::Sm));
    assert_eq!("agg-mean".parse::<Explainer>().unwrap(), Explainer::default_aggregate());
    assert_eq!("agg-mean".parse::<Explainer>().unwrap().id(), "agg-mean");
    let pair: Explainer = "agg-mean:sm+lrp".parse().unwrap();
    assert_eq!(pair.members(), vec![Method::Sm, Method::Lrp]);
    assert_eq!(pair.id(), "agg-mean:sm+lrp");
    assert!("ig".parse::<Explainer>().is_err());
    assert!("agg-mean:sm".parse::<Explainer>().is_err());
    assert!("agg-mean:sm+sm".parse::<Explainer>().is_err());
    let bad = AttackConfig {
        beta_start: 900.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_iteration_transfer_matrix_is_zero() {
    let g = small_relu_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<_> = (0..2)
        .map(|_| (random_image(&mut rng, Shape::new(1, 10, 10)), random_image(&mut rng, Shape::new(1, 10, 10))))
        .collect();
    let attacked: Vec<Explainer> = [Method::Sm, Method::Gb, Method::Lrp].map(Explainer::Single).to_vec();
    let evaluated = [Method::Sm, Method::Gb, Method::Lrp];
    let cells = transfer_matrix(&g, &pairs, &attacked, &evaluated, &short(Explainer::Single(Method::Sm), 0)).unwrap();
    assert_eq!(cells.len(), 9);
    for c in &cells {
        assert_eq!(c.records.len(), 2 * 3);
        assert!(c.mean_diff.values().all(|v| *v == 0.0));
        assert_eq!(c.mean_diff.len(), Similarity::standard().len());
    }
}
