//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Trained checkpoints are cached under the cargo target directory; delete
//! `acceptance/` there to retrain. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p xagg-cli --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use xagg_cli::commands::{transfer_fractions, IrofRun};
use xagg_cli::pipeline::{attack_runs, blank_runs, decompose_trials, irof_table, DecomposeSettings, EvalMethod, ExplainSetup};
use xagg_core::attack::{AttackConfig, Explainer, ATTACKABLE};
use xagg_core::data::{self, Dataset, DatasetName, Split};
use xagg_core::evaluate::{sensitivity_n, SensitivityConfig, Similarity};
use xagg_core::explain::{integrated_gradients, lrp_epsilon, ExplainConfig, Method};
use xagg_core::heatmap::{Heatmap, Provenance};
use xagg_core::model::Checkpoint;
use xagg_core::tensor::{
    grad_input, grad_of_scalar_of_grad, param_gradients, Conv2d, Dense, Graph, ImageTensor, Layer, LrpEpsilon,
    Nonlinearity, Shape,
};

const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MNIST_EPOCHS: usize = 2;
const FASHION_EPOCHS: usize = 3;
const ATTACK_IMAGES: usize = 20;
const ATTACK_ITERATIONS: usize = 300;
const TARGET_OFFSET: usize = 1000;
const IROF_IMAGES: usize = 100;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn failed(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

type Check = Result<Verdict, String>;

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn xagg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xagg"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("XAGG_") && k != "XAGG_DATA_DIR") {
        c.env_remove(k);
    }
    c
}

fn run_cli(args: &[&str]) -> Result<Value, String> {
    let o = xagg().args(args).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("xagg {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()));
    }
    serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- models

struct Trained {
    ckpt: Checkpoint,
    path: PathBuf,
    seconds: f64,
    accuracy: f64,
    cached: bool,
}

/// Trains `dataset` through the CLI, or reuses the cached run with the same
/// epoch budget.
fn trained(dataset: &str, epochs: usize) -> Result<Trained, String> {
    let dir = cache_dir().join(dataset);
    let path = dir.join("model.xagc");
    let record = dir.join("acceptance_train.json");
    if let Ok(bytes) = std::fs::read(&record) {
        let r: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        if r["epochs"].as_u64() == Some(epochs as u64) && path.is_file() {
            return Ok(Trained {
                ckpt: Checkpoint::load(&path).map_err(|e| e.to_string())?,
                path,
                seconds: r["seconds"].as_f64().unwrap_or(f64::NAN),
                accuracy: r["test_accuracy"].as_f64().unwrap_or(f64::NAN),
                cached: true,
            });
        }
    }
    let start = Instant::now();
    let summary = run_cli(&[
        "train",
        "--dataset",
        dataset,
        "--max-epochs",
        &epochs.to_string(),
        "--seed",
        "0",
        "--out-dir",
        dir.to_str().unwrap(),
    ])?;
    let seconds = start.elapsed().as_secs_f64();
    let accuracy = summary["test_accuracy"].as_f64().ok_or("train summary lacks test_accuracy")?;
    let r = json!({ "epochs": epochs, "seconds": seconds, "test_accuracy": accuracy });
    std::fs::write(&record, serde_json::to_vec_pretty(&r).unwrap()).map_err(|e| e.to_string())?;
    Ok(Trained {
        ckpt: Checkpoint::load(&path).map_err(|e| e.to_string())?,
        path,
        seconds,
        accuracy,
        cached: false,
    })
}

struct Context {
    mnist: Option<Result<Trained, String>>,
    mnist_test: Option<Result<Dataset, String>>,
    attacks: Option<Result<xagg_cli::pipeline::AttackOutcome, String>>,
}

impl Context {
    fn mnist(&mut self) -> Result<&Trained, String> {
        self.mnist
            .get_or_insert_with(|| trained("mnist", MNIST_EPOCHS))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn mnist_test(&mut self) -> Result<&Dataset, String> {
        self.mnist_test
            .get_or_insert_with(|| data::load(&data::data_dir(), DatasetName::Mnist, Split::Test).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Targeted attacks on SM, GB, LRP and their mean, each scored with every
    /// single method on the same adversarial inputs.
    fn attacks(&mut self) -> Result<&xagg_cli::pipeline::AttackOutcome, String> {
        if self.attacks.is_none() {
            let r = (|| {
                let graph = self.mnist()?.ckpt.graph.clone();
                let test = self.mnist_test()?.clone();
                let pairs: Vec<(usize, usize)> = (0..ATTACK_IMAGES).map(|i| (i, i + TARGET_OFFSET)).collect();
                attack_runs(&graph, &test, &attacked(), &ATTACKABLE, &pairs, &attack_config(), 1)
                    .map_err(|e| e.to_string())
            })();
            self.attacks = Some(r);
        }
        self.attacks.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }
}

fn attacked() -> Vec<Explainer> {
    let mut v: Vec<Explainer> = ATTACKABLE.iter().map(|&m| Explainer::Single(m)).collect();
    v.push(Explainer::default_aggregate());
    v
}

fn attack_config() -> AttackConfig {
    AttackConfig {
        iterations: ATTACK_ITERATIONS,
        ..Default::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------- 1

fn decomposition() -> Check {
    let start = Instant::now();
    let s = decompose_trials(&DecomposeSettings::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::new(
        s.trials == 1000 && s.passed() && secs < 10.0,
        format!(
            "{} stacks, max |identity residual| {:.1e}, {} inequality and {} strictness violations, {secs:.2}s",
            s.trials, s.max_abs_identity_residual, s.inequality_violations, s.strictness_violations
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

fn small_net(rng: &mut ChaCha8Rng, act: Nonlinearity) -> (Graph, ImageTensor, usize) {
    let (c, h, w) = (rng.random_range(1..=2), rng.random_range(6..=8), rng.random_range(6..=8));
    let (k, oc) = (rng.random_range(2..=3), rng.random_range(1..=3));
    let input = Shape::new(c, h, w);
    let act_layer = || match act {
        Nonlinearity::Relu => Layer::Relu,
        Nonlinearity::SoftPlus { beta } => Layer::SoftPlus { beta },
    };
    let (fh, fw) = ((h + 1 - k) / 2, (w + 1 - k) / 2);
    let flat = oc * fh * fw;
    let (hidden, classes) = (rng.random_range(2..=5), rng.random_range(2..=4));
    let layers = vec![
        Layer::Conv2d(Conv2d {
            in_channels: c,
            out_channels: oc,
            kernel: k,
            weight: Arc::new(rand_vec(rng, oc * c * k * k, 0.8)),
            bias: Arc::new(rand_vec(rng, oc, 0.2)),
        }),
        act_layer(),
        Layer::MaxPool2d { size: 2 },
        Layer::Dropout { rate: 0.5 },
        Layer::Flatten,
        Layer::Dense(Dense {
            inputs: flat,
            outputs: hidden,
            weight: Arc::new(rand_vec(rng, flat * hidden, 0.8)),
            bias: Arc::new(rand_vec(rng, hidden, 0.2)),
        }),
        act_layer(),
        Layer::Dense(Dense {
            inputs: hidden,
            outputs: classes,
            weight: Arc::new(rand_vec(rng, hidden * classes, 1.0)),
            bias: Arc::new(rand_vec(rng, classes, 0.2)),
        }),
    ];
    let graph = Graph::new(input, layers).unwrap();
    let x = ImageTensor::new(input, (0..input.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
    let class = rng.random_range(0..classes);
    (graph, x, class)
}

/// ReLU input signs and pool winners. A finite-difference step that
/// changes them crosses a kink and is left out.
fn kink_pattern(graph: &Graph, x: &[f64]) -> Vec<bool> {
    let tape = graph.record_batch(x, 1, None::<&mut ChaCha8Rng>).unwrap();
    let mut out = Vec::new();
    for (l, layer) in graph.layers().iter().enumerate() {
        match layer {
            Layer::Relu => out.extend(tape.acts[l].iter().map(|z| *z > 0.0)),
            Layer::MaxPool2d { .. } => out.extend(tape.acts[l].iter().map(|v| tape.acts[l + 1].contains(v))),
            _ => {}
        }
    }
    out
}

fn rel_err(analytic: f64, reference: f64, scale: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(1e-3 * scale).max(1e-12)
}

/// Max relative error over the 100 largest reference entries.
fn worst(analytic: &[f64], reference: &[Option<f64>]) -> f64 {
    let mut idx: Vec<usize> = (0..analytic.len()).filter(|&i| reference[i].is_some()).collect();
    idx.sort_by(|&a, &b| reference[b].unwrap().abs().total_cmp(&reference[a].unwrap().abs()));
    let scale = idx.first().map_or(0.0, |&i| reference[i].unwrap().abs());
    idx.iter().take(100).map(|&i| rel_err(analytic[i], reference[i].unwrap(), scale)).fold(0.0, f64::max)
}

fn central(graph: &Graph, x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<Option<f64>> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            let base = kink_pattern(graph, x);
            (kink_pattern(graph, &p) == base && kink_pattern(graph, &m) == base).then(|| (f(&p) - f(&m)) / (2.0 * h))
        })
        .collect()
}

fn gradients() -> Check {
    let start = Instant::now();
    let (mut first, mut params, mut second) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if seed % 2 == 0 {
            Nonlinearity::Relu
        } else {
            Nonlinearity::SoftPlus { beta: 2.0 }
        };
        let (graph, x, class) = small_net(&mut rng, act);
        let logit = |v: &[f64]| graph.logits(&x.with_data(v.to_vec()).unwrap()).unwrap()[class];

        let g = grad_input(&graph, &x, class, true).map_err(|e| e.to_string())?;
        first = first.max(worst(g.data(), &central(&graph, x.data(), 1e-5, logit)));

        let tape = graph.record(&x).map_err(|e| e.to_string())?;
        let mut seed_vec = vec![0.0; graph.num_classes()];
        seed_vec[class] = 1.0;
        let pg = param_gradients(&graph, &tape, seed_vec).map_err(|e| e.to_string())?;
        for (b, blob) in pg.iter().enumerate() {
            let base = kink_pattern(&graph, x.data());
            let fd: Vec<Option<f64>> = (0..blob.len())
                .map(|i| {
                    let moved = |h: f64| {
                        let mut gr = graph.clone();
                        gr.params_mut()[b][i] += h;
                        gr
                    };
                    let (p, m) = (moved(1e-5), moved(-1e-5));
                    (kink_pattern(&p, x.data()) == base && kink_pattern(&m, x.data()) == base)
                        .then(|| (p.logits(&x).unwrap()[class] - m.logits(&x).unwrap()[class]) / 2e-5)
                })
                .collect();
            params = params.max(worst(blob, &fd));
        }

        let soft = graph.substitute_nonlinearity(Nonlinearity::SoftPlus { beta: 3.0 });
        let weights: Vec<f64> = (0..x.data().len()).map(|i| 1.0 + (i % 3) as f64).collect();
        let scalar = |g: &[f64]| -> (f64, Vec<f64>) {
            let v = g.iter().zip(&weights).map(|(g, w)| w * g * g).sum();
            (v, g.iter().zip(&weights).map(|(g, w)| 2.0 * w * g).collect())
        };
        let (_, d) = grad_of_scalar_of_grad(&soft, &x, class, true, scalar).map_err(|e| e.to_string())?;
        let fd = central(&soft, x.data(), 1e-4, |v| {
            scalar(grad_input(&soft, &x.with_data(v.to_vec()).unwrap(), class, true).unwrap().data()).0
        });
        second = second.max(worst(d.data(), &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::new(
        first < 1e-4 && params < 1e-4 && second < 1e-3 && secs < 120.0,
        format!(
            "100 nets: input gradient {first:.1e}, parameter gradient {params:.1e} (< 1e-4), second order {second:.1e} (< 1e-3), {secs:.1}s"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn completeness(ctx: &mut Context) -> Check {
    let graph = ctx.mnist()?.ckpt.graph.clone();
    let test = ctx.mnist_test()?;
    let mut errs = Vec::new();
    for i in 0..50 {
        let x = test.image(i);
        let black = ImageTensor::filled(x.shape(), 0.0);
        let class = graph.forward(&x).map_err(|e| e.to_string())?.class();
        let ig = integrated_gradients(&graph, &x, class, &black, 128).map_err(|e| e.to_string())?;
        let delta = graph.logits(&x).unwrap()[class] - graph.logits(&black).unwrap()[class];
        errs.push((ig.sum() - delta).abs() / delta.abs());
    }
    let ig_worst = errs.iter().copied().fold(0.0, f64::max);

    let mut lrp_worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut p = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        let g = Graph::new(
            Shape::new(1, 8, 8),
            vec![
                Layer::Conv2d(Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    weight: Arc::new(p(36)),
                    bias: Arc::new(vec![0.0; 4]),
                }),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
                Layer::Dense(Dense {
                    inputs: 36,
                    outputs: 8,
                    weight: Arc::new(p(288)),
                    bias: Arc::new(vec![0.0; 8]),
                }),
                Layer::Relu,
                Layer::Dense(Dense {
                    inputs: 8,
                    outputs: 3,
                    weight: Arc::new(p(24)),
                    bias: Arc::new(vec![0.0; 3]),
                }),
            ],
        )
        .unwrap();
        let x = ImageTensor::new(Shape::new(1, 8, 8), p(64).iter().map(|v| v + 0.5).collect()).unwrap();
        let logits = g.logits(&x).unwrap();
        let class = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        if logits[class] <= 0.0 {
            continue;
        }
        let r = lrp_epsilon(&g, &x, class, LrpEpsilon::MeanAbsFactor(1e-9)).map_err(|e| e.to_string())?;
        lrp_worst = lrp_worst.max((r.sum() - logits[class]).abs() / logits[class].abs());
    }
    Ok(Verdict::new(
        ig_worst <= 0.01 && lrp_worst <= 1e-3,
        format!(
            "IG 128 steps on 50 MNIST images: worst completeness error {:.3}% (mean {:.3}%); LRP conservation worst {lrp_worst:.1e}",
            100.0 * ig_worst,
            100.0 * mean(&errs)
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn sensitivity_linear() -> Check {
    let shape = Shape::new(1, 28, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let classes = 4;
    let w: Vec<f64> = (0..784 * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let graph = Graph::new(
        shape,
        vec![
            Layer::Flatten,
            Layer::Dense(Dense {
                inputs: 784,
                outputs: classes,
                weight: Arc::new(w.clone()),
                bias: Arc::new(vec![0.0; classes]),
            }),
        ],
    )
    .unwrap();
    let items: Vec<_> = (0..5)
        .map(|k| {
            let class = k % classes;
            let x = ImageTensor::new(shape, (0..784).map(|_| rng.random::<f64>()).collect()).unwrap();
            let e: Vec<f64> = (0..784).map(|p| w[class * 784 + p] * x.data()[p]).collect();
            (x, class, Heatmap::new(28, 28, e, Provenance::new("w*x")).unwrap())
        })
        .collect();
    let r = sensitivity_n(&graph, &items, &SensitivityConfig::default()).map_err(|e| e.to_string())?;
    let worst = r
        .points
        .iter()
        .map(|p| p.mean_pcc.map_or(f64::INFINITY, |v| (v - 1.0).abs()))
        .fold(0.0, f64::max);
    Ok(Verdict::new(worst <= 1e-6, format!("{} subset sizes, max |PCC - 1| = {worst:.1e}", r.points.len())))
}

// ---------------------------------------------------------------- 5

fn training(ctx: &mut Context) -> Check {
    let mut detail = String::new();
    let mut passed = true;
    for (name, epochs, floor) in [("mnist", MNIST_EPOCHS, 0.97), ("fashion", FASHION_EPOCHS, 0.88)] {
        let t = if name == "mnist" {
            ctx.mnist().map(|t| (t.accuracy, t.seconds, t.cached, t.path.clone()))
        } else {
            trained(name, epochs).map(|t| (t.accuracy, t.seconds, t.cached, t.path))
        };
        match t {
            Ok((acc, secs, cached, _)) => {
                let ok = acc >= floor && secs <= TRAIN_BUDGET.as_secs_f64();
                passed &= ok;
                let _ = write!(
                    detail,
                    "{name}: {:.2}% test accuracy (≥ {:.0}%) in {:.0}s{}; ",
                    100.0 * acc,
                    100.0 * floor,
                    secs,
                    if cached { ", cached run" } else { "" }
                );
            }
            Err(e) => {
                passed = false;
                let _ = write!(detail, "{name}: {e}; ");
            }
        }
    }
    Ok(Verdict::new(passed, detail.trim_end_matches("; ").to_string()))
}

// ---------------------------------------------------------------- 6

fn aggregation_quality(ctx: &mut Context) -> Check {
    let graph = ctx.mnist()?.ckpt.graph.clone();
    let test = ctx.mnist_test()?.clone();
    let members = Method::AGGREGATE_DEFAULT.to_vec();
    let cfg = ExplainConfig::default();
    let setup = ExplainSetup {
        graph: &graph,
        cfg: &cfg,
        seed: 0,
        members: members.clone(),
    };
    let mut methods: Vec<EvalMethod> = members.iter().map(|&m| EvalMethod::Single(m)).collect();
    methods.extend([EvalMethod::AggMean, EvalMethod::AggVar, EvalMethod::Random]);
    let run = IrofRun::default();
    let indices: Vec<usize> = (0..IROF_IMAGES).collect();
    let table = irof_table(&setup, &test, &indices, &methods, &run.settings(), None, run.epsilon_multiplier, 1)
        .map_err(|e| e.to_string())?;
    let score = |m: &str| table.mean(m).unwrap_or(f64::NAN);
    let singles: Vec<(String, f64)> = members.iter().map(|m| (m.id().to_string(), score(m.id()))).collect();
    let single_mean = mean(&singles.iter().map(|s| s.1).collect::<Vec<_>>());
    let best = singles.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let random = score("random");
    let images = indices.len() - table.skipped.len();
    let mut passed = images >= 100;
    for agg in ["agg-mean", "agg-var"] {
        passed &= score(agg) > single_mean && score(agg) >= best - 1.0;
    }
    passed &= methods.iter().filter(|m| **m != EvalMethod::Random).all(|m| score(m.id()) > random);
    let listing: Vec<String> = singles
        .iter()
        .cloned()
        .chain(["agg-mean", "agg-var", "random"].map(|m| (m.to_string(), score(m))))
        .map(|(m, s)| format!("{m} {s:.2}"))
        .collect();
    Ok(Verdict::new(
        passed,
        format!(
            "SLIC-IROF over {images} images: {}; member mean {single_mean:.2}, best single {best:.2}",
            listing.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 7, 8

fn attack_robustness(ctx: &mut Context) -> Check {
    let rows = &ctx.attacks()?.self_rows;
    let per = |e: &str, metric: &str| {
        mean(&rows.iter().filter(|r| r.attacked_method == e && r.metric == metric).map(|r| r.metric_diff).collect::<Vec<_>>())
    };
    let agg = Explainer::default_aggregate().id();
    let max_mse = rows.iter().map(|r| r.input_mse).fold(0.0, f64::max);
    let images = rows.iter().filter(|r| r.attacked_method == agg && r.metric == "pcc").count();
    let mut passed = max_mse < 1e-2 && images >= ATTACK_IMAGES;
    let mut detail = Vec::new();
    for metric in ["pcc", "topk"] {
        let a = per(&agg, metric);
        let members: Vec<String> = ATTACKABLE
            .iter()
            .map(|m| {
                let d = per(m.id(), metric);
                passed &= a < d;
                format!("{} {d:+.4}", m.id())
            })
            .collect();
        detail.push(format!("{metric} diff: {agg} {a:+.4} vs {}", members.join(", ")));
    }
    detail.push(format!("max input MSE {max_mse:.1e} over {images} images"));
    Ok(Verdict::new(passed, detail.join("; ")))
}

fn transferability(ctx: &mut Context) -> Check {
    let rows: Vec<_> = ctx
        .attacks()?
        .transfer_rows
        .iter()
        .filter(|r| ATTACKABLE.iter().any(|m| m.id() == r.attacked_method))
        .cloned()
        .collect();
    let fractions = transfer_fractions(&rows, Similarity::Pcc);
    let mut passed = fractions.len() == 6;
    let mut cells = Vec::new();
    for f in &fractions {
        let v = f["fraction_below_attacked"].as_f64().unwrap_or(0.0);
        passed &= v >= 0.7;
        cells.push(format!("{}→{} {:.0}%", f["attacked"].as_str().unwrap_or("?"), f["evaluated"].as_str().unwrap_or("?"), 100.0 * v));
    }
    Ok(Verdict::new(passed, format!("share of images with smaller PCC diff on B: {}", cells.join(", "))))
}

// ---------------------------------------------------------------- 9

fn blank_region(ctx: &mut Context) -> Check {
    let graph = ctx.mnist()?.ckpt.graph.clone();
    let test = ctx.mnist_test()?.clone();
    let images: Vec<usize> = (0..ATTACK_IMAGES).collect();
    let side = xagg_cli::commands::AttackRun::default().blank_side;
    let rows = blank_runs(&graph, &test, &attacked(), &images, side, &attack_config(), 1).map_err(|e| e.to_string())?;
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by.entry(r.attacked_method.clone()).or_default().push(r.preserved);
    }
    let agg = Explainer::default_aggregate().id();
    let agg_mean = mean(by.get(&agg).map_or(&[][..], Vec::as_slice));
    let mut passed = by.get(&agg).is_some_and(|v| v.len() == ATTACK_IMAGES);
    let mut cells = vec![format!("{agg} {agg_mean:.3}")];
    for m in ATTACKABLE {
        let v = mean(by.get(m.id()).map_or(&[][..], Vec::as_slice));
        passed &= agg_mean > v;
        cells.push(format!("{} {v:.3}", m.id()));
    }
    Ok(Verdict::new(passed, format!("mean preserved in-mask relevance ({side}×{side} square): {}", cells.join(", "))))
}

// ---------------------------------------------------------------- 10

fn determinism() -> Check {
    let root = cache_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    let dir = |name: &str| root.join(name).to_string_lossy().into_owned();
    let model = root.join("model");
    run_cli(&["train", "--dataset", "synthetic", "--train-limit", "300", "--max-epochs", "2", "--seed", "7", "--out-dir", &dir("model")])?;
    run_cli(&["train", "--dataset", "synthetic", "--train-limit", "300", "--max-epochs", "2", "--seed", "7", "--out-dir", &dir("model2")])?;
    let ckpt = model.join("model.xagc").to_string_lossy().into_owned();
    let commands: [(&str, Vec<&str>, &str); 5] = [
        ("eval-irof", vec!["--n-images", "4", "--segments", "grid"], "irof.csv"),
        ("eval-sensn", vec!["--n-images", "3", "--n-grid", "4", "--subsets", "10"], "sensn.csv"),
        ("pairwise", vec!["--n-images", "3", "--segments", "grid", "--methods", "sm,gb,ig"], "pairwise_ratio.csv"),
        ("attack", vec!["--n-images", "2", "--iters", "10", "--attacked", "sm,lrp,agg-mean"], "attack_runs.csv"),
        ("transfer", vec!["--n-images", "2", "--iters", "10"], "transfer.csv"),
    ];
    let mut compared = vec!["train_history.csv".to_string()];
    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let mut identical = read(model.join("train_history.csv"))? == read(root.join("model2/train_history.csv"))?
        && read(model.join("model.xagc"))? == read(root.join("model2/model.xagc"))?;
    for (cmd, extra, csv) in &commands {
        let mut outputs = Vec::new();
        for (run, jobs) in [("a", "1"), ("b", "1"), ("c", "3")] {
            let out = dir(&format!("{cmd}-{run}"));
            let mut args = vec![*cmd, "--ckpt", &ckpt, "--seed", "9", "--jobs", jobs, "--out-dir", &out];
            args.extend(extra.iter().copied());
            run_cli(&args)?;
            outputs.push(read(Path::new(&out).join(csv))?);
        }
        identical &= !outputs[0].is_empty() && outputs.iter().all(|o| *o == outputs[0]);
        compared.push(csv.to_string());
    }
    Ok(Verdict::new(
        identical,
        format!("repeated runs and --jobs 1 vs 3 byte-identical for {}", compared.join(", ")),
    ))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let mut ctx = Context {
        mnist: None,
        mnist_test: None,
        attacks: None,
    };
    type Criterion = (u32, &'static str, fn(&mut Context) -> Check);
    let criteria: [Criterion; 10] = [
        (1, "decomposition identity", |_| decomposition()),
        (2, "gradient correctness", |_| gradients()),
        (3, "IG completeness and LRP conservation", completeness),
        (4, "sensitivity-n on a linear model", |_| sensitivity_linear()),
        (5, "reference CNN training", training),
        (6, "aggregation quality (SLIC-IROF)", aggregation_quality),
        (7, "attack robustness of the aggregate", attack_robustness),
        (8, "attack transferability", transferability),
        (9, "blank-region attack", blank_region),
        (10, "CLI determinism", |_| determinism()),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut ctx).unwrap_or_else(Verdict::failed);
        failed += usize::from(!v.passed);
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.0}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
