//! Input-space manipulation of explanations for a fixed model.
//!
//! The explanation under attack is recomputed on a SoftPlus copy of the
//! graph so that it is differentiable in the input; β grows geometrically
//! across iterations. Reported heatmaps always come from the original graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::{agg_mean, HeatmapStack};
use crate::error::{Error, Result};
use crate::evaluate::{similarity, AttackRow, Similarity};
use crate::explain::{explain, ExplainConfig, Method};
use crate::heatmap::Heatmap;
use crate::tensor::{
    argmax, backward, reverse_sweep, rule_adjoint, seed_adjoint, seed_for, Adjoints, Graph, ImageTensor, Nonlinearity,
    Rule, SeedKind, Tape,
};

/// Methods whose explanation can be differentiated with respect to the input.
pub const ATTACKABLE: [Method; 3] = [Method::Sm, Method::Gb, Method::Lrp];

/// The explanation under attack: one method or the mean of several.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Explainer {
    Single(Method),
    AggMean(Vec<Method>),
}

impl Explainer {
    pub fn default_aggregate() -> Self {
        Explainer::AggMean(ATTACKABLE.to_vec())
    }

    pub fn members(&self) -> Vec<Method> {
        match self {
            Explainer::Single(m) => vec![*m],
            Explainer::AggMean(ms) => ms.clone(),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Explainer::Single(m) => m.id().to_string(),
            Explainer::AggMean(ms) if ms[..] == ATTACKABLE[..] => "agg-mean".into(),
            Explainer::AggMean(ms) => {
                format!("agg-mean:{}", ms.iter().map(Method::id).collect::<Vec<_>>().join("+"))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let members = self.members();
        if let Some(m) = members.iter().find(|m| !ATTACKABLE.contains(m)) {
            return Err(Error::invalid(format!("{m} cannot be attacked (expected sm, gb or lrp)")));
        }
        if let Explainer::AggMean(ms) = self {
            let mut sorted = ms.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() < 2 || sorted.len() != ms.len() {
                return Err(Error::invalid("an aggregate needs at least 2 distinct members"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Explainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Explainer {
    type Err = Error;

    /// `sm`, `gb`, `lrp`, `agg-mean` (all three) or `agg-mean:sm+gb`.
    fn from_str(s: &str) -> Result<Self> {
        let e = match s.split_once(':') {
            None if s.eq_ignore_ascii_case("agg-mean") => Explainer::default_aggregate(),
            None => Explainer::Single(s.parse()?),
            Some((head, members)) if head.eq_ignore_ascii_case("agg-mean") => {
                Explainer::AggMean(members.split('+').map(str::parse).collect::<Result<_>>()?)
            }
            Some(_) => return Err(Error::invalid(format!("unknown explainer {s:?}"))),
        };
        e.validate()?;
        Ok(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub explainer: Explainer,
    pub lr: f64,
    pub iterations: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub explanation_weight: f64,
    /// `None` balances the output term against the explanation term at the start.
    pub output_weight: Option<f64>,
    pub clamp: (f64, f64),
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Settings for the explanations that are evaluated (LRP ε, SG noise, ...).
    pub explain: ExplainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            explainer: Explainer::Single(Method::Sm),
            lr: 1e-3,
            iterations: 1500,
            beta_start: 10.0,
            beta_end: 800.0,
            explanation_weight: 1.0,
            output_weight: None,
            clamp: (0.0, 1.0),
            optimizer: Optimizer::adam(),
            seed: 0,
            explain: ExplainConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.explainer.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("attack lr must be ≥ 0, got {}", self.lr)));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end.is_finite()) {
            return Err(Error::invalid(format!(
                "β schedule needs 0 < start ≤ end, got {} → {}",
                self.beta_start, self.beta_end
            )));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::invalid("clamp range must be non-empty"));
        }
        if !(self.explanation_weight >= 0.0) || self.output_weight.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// β at iteration `t` of `self.iterations` (geometric interpolation).
    pub fn beta(&self, t: usize) -> f64 {
        if self.iterations == 0 {
            return self.beta_end;
        }
        self.beta_start * (self.beta_end / self.beta_start).powf(t as f64 / self.iterations as f64)
    }
}

/// What the explanation should be pushed towards.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Match this (normalized) heatmap.
    Target(Heatmap),
    /// Drain relevance out of the pixels where the mask is set.
    BlankRegion(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: Similarity,
    pub before: f64,
    pub after: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: ImageTensor,
    /// Loss at the start and after every iteration.
    pub trace: Vec<f64>,
    pub class: usize,
    pub explainer: Explainer,
    pub e_orig: Heatmap,
    pub e_adv: Heatmap,
    pub e_target: Option<Heatmap>,
    /// Filled for target objectives.
    pub metrics: Vec<MetricRecord>,
    pub input_mse: f64,
    pub label_preserved: bool,
    /// Learning rate after any halvings.
    pub final_lr: f64,
}

impl AttackResult {
    pub fn metric(&self, m: Similarity) -> Option<&MetricRecord> {
        self.metrics.iter().find(|r| r.metric.id() == m.id())
    }

    /// Rows for `attack_runs.csv` with the attacked method also evaluated.
    pub fn rows(&self, image_id: usize) -> Vec<AttackRow> {
        self.metrics
            .iter()
            .map(|r| AttackRow {
                image_id,
                attacked_method: self.explainer.id(),
                evaluated_method: self.explainer.id(),
                metric: r.metric.id().into(),
                value_before: r.before,
                value_after: r.after,
                metric_diff: r.diff,
                input_mse: self.input_mse,
                label_preserved: self.label_preserved,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlankRegionResult {
    pub attack: AttackResult,
    pub start_fraction: f64,
    pub end_fraction: f64,
    /// end / start in-mask relevance (1 when there was none to begin with).
    pub preserved: f64,
}

/// Normalized (non-negative, unit-sum) explanation on the given graph.
pub fn reference_explanation(
    graph: &Graph,
    x: &ImageTensor,
    class: usize,
    explainer: &Explainer,
    cfg: &ExplainConfig,
    seed: u64,
    image: u64,
) -> Result<Heatmap> {
    let members = explainer.members();
    if let [m] = members[..] {
        return Ok(explain(graph, x, class, m, cfg, seed, image)?.normalized(true));
    }
    let maps = members
        .iter()
        .map(|&m| explain(graph, x, class, m, cfg, seed, image))
        .collect::<Result<Vec<_>>>()?;
    Ok(agg_mean(&HeatmapStack::normalize(&maps, true)?))
}

/// Loss value split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub explanation: f64,
    pub output: f64,
    pub total: f64,
}

/// What the differentiable loss needs besides the current input.
pub struct LossSpec<'a> {
    pub members: &'a [Method],
    pub class: usize,
    pub objective: &'a Objective,
    pub reference_logits: &'a [f64],
    pub explanation_weight: f64,
    pub output_weight: f64,
    pub lrp: crate::tensor::LrpEpsilon,
}

fn rule_for(m: Method, spec: &LossSpec) -> (Rule, SeedKind) {
    match m {
        Method::Gb => (Rule::Guided, SeedKind::Logit),
        Method::Lrp => (Rule::Lrp(spec.lrp), SeedKind::LrpLogit),
        _ => (Rule::Gradient, SeedKind::Logit),
    }
}

/// Loss and its input gradient on a SoftPlus graph.
pub fn loss_and_gradient(graph: &Graph, x: &[f64], spec: &LossSpec) -> Result<(LossValue, Vec<f64>)> {
    if graph.has_relu() {
        return Err(Error::ContractViolation("attack loss needs a SoftPlus graph".into()));
    }
    let tape: Tape = graph.record_batch(x, 1, None::<&mut rand_chacha::ChaCha8Rng>)?;
    let shape = graph.input_shape();
    let plane = shape.pixels();
    let j = spec.members.len() as f64;

    struct Member {
        rule: Rule,
        kind: SeedKind,
        bp: crate::tensor::Backprop,
        raw: Vec<f64>,
        e: Vec<f64>,
        total: f64,
    }
    let mut members = Vec::with_capacity(spec.members.len());
    let mut mean = vec![0.0; plane];
    for &m in spec.members {
        let (rule, kind) = rule_for(m, spec);
        let bp = backward(graph, &tape, seed_for(&tape, &[spec.class], kind), rule)?;
        let mut h = vec![0.0; plane];
        for ch in bp.input().chunks(plane) {
            for (hp, v) in h.iter_mut().zip(ch) {
                *hp += if matches!(rule, Rule::Lrp(_)) { *v } else { v.abs() };
            }
        }
        let raw = h.clone();
        if matches!(rule, Rule::Lrp(_)) {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let total: f64 = h.iter().sum();
        let e: Vec<f64> = if total > 0.0 {
            h.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / plane as f64; plane]
        };
        for (a, v) in mean.iter_mut().zip(&e) {
            *a += v / j;
        }
        members.push(Member { rule, kind, bp, raw, e, total });
    }

    let (explanation, mean_bar) = match spec.objective {
        Objective::Target(t) => {
            let diff: Vec<f64> = mean.iter().zip(t.values()).map(|(a, b)| a - b).collect();
            (diff.iter().map(|d| d * d).sum::<f64>(), diff.iter().map(|d| 2.0 * d).collect::<Vec<_>>())
        }
        Objective::BlankRegion(mask) => (
            mean.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>(),
            mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
        ),
    };
    let logits = tape.logits();
    let output: f64 = logits.iter().zip(spec.reference_logits).map(|(a, b)| (a - b).powi(2)).sum();
    let value = LossValue {
        explanation,
        output,
        total: spec.explanation_weight * explanation + spec.output_weight * output,
    };

    let mut acc = Adjoints::zeros(&tape);
    for m in &members {
        if m.total <= 0.0 {
            continue;
        }
        // d/dh of h/Σh applied to the adjoint of this member's normalized map.
        let e_bar: Vec<f64> = mean_bar.iter().map(|g| spec.explanation_weight * g / j).collect();
        let dot: f64 = e_bar.iter().zip(&m.e).map(|(a, b)| a * b).sum();
        let h_bar: Vec<f64> = e_bar.iter().map(|g| (g - dot) / m.total).collect();
        let lrp = matches!(m.rule, Rule::Lrp(_));
        let mut signal_bar = vec![0.0; shape.len()];
        for (c, chunk) in signal_bar.chunks_mut(plane).enumerate() {
            for (p, sb) in chunk.iter_mut().enumerate() {
                let s = m.bp.input()[c * plane + p];
                // Zero relevance (blank input pixels) still passes gradient.
                let slope = if lrp {
                    (m.raw[p] >= 0.0) as u8 as f64
                } else if s == 0.0 {
                    0.0
                } else {
                    s.signum()
                };
                *sb = h_bar[p] * slope;
            }
        }
        let seed_bar = rule_adjoint(graph, &tape, &m.bp, m.rule, signal_bar, &mut acc)?;
        seed_adjoint(&tape, &[spec.class], m.kind, &seed_bar, acc.logits_mut());
    }
    for (lb, (a, b)) in acc.logits_mut().iter_mut().zip(logits.iter().zip(spec.reference_logits)) {
        *lb += spec.output_weight * 2.0 * (a - b);
    }
    let grad = reverse_sweep(graph, &tape, acc)?;
    Ok((value, grad))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn direction(opt: Optimizer, state: &mut AdamState, grad: &[f64]) -> Vec<f64> {
    match opt {
        Optimizer::GradientDescent => grad.to_vec(),
        Optimizer::Adam { beta1, beta2, epsilon } => {
            state.t += 1;
            let (c1, c2) = (1.0 - beta1.powi(state.t), 1.0 - beta2.powi(state.t));
            grad.iter()
                .enumerate()
                .map(|(i, g)| {
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + epsilon)
                })
                .collect()
        }
    }
}

/// Optimizes the input; returns the final input, loss trace and final lr.
fn optimize(graph: &Graph, x: &ImageTensor, class: usize, objective: &Objective, cfg: &AttackConfig) -> Result<(ImageTensor, Vec<f64>, f64)> {
    cfg.validate()?;
    let members = cfg.explainer.members();
    let reference_logits = graph.logits(x)?;
    let soft = |t: usize| graph.substitute_nonlinearity(Nonlinearity::SoftPlus { beta: cfg.beta(t) });
    let mut spec = LossSpec {
        members: &members,
        class,
        objective,
        reference_logits: &reference_logits,
        explanation_weight: cfg.explanation_weight,
        output_weight: 0.0,
        lrp: cfg.explain.lrp_epsilon,
    };
    let (initial, _) = loss_and_gradient(&soft(0), x.data(), &spec)?;
    spec.output_weight = match cfg.output_weight {
        Some(w) => w,
        None => {
            // The output term equals the initial explanation term once the
            // logits have moved by their own norm.
            let norm: f64 = reference_logits.iter().map(|l| l * l).sum::<f64>().max(f64::MIN_POSITIVE);
            cfg.explanation_weight * initial.explanation.max(f64::EPSILON) / norm
        }
    };
    let (mut value, mut grad) = loss_and_gradient(&soft(0), x.data(), &spec)?;
    if !value.total.is_finite() {
        return Err(Error::AttackAborted {
            iteration: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    let mut trace = vec![value.total];
    let (lo, hi) = cfg.clamp;
    let mut cur = x.data().to_vec();
    let mut lr = cfg.lr;
    let mut adam = AdamState {
        m: vec![0.0; cur.len()],
        v: vec![0.0; cur.len()],
        t: 0,
    };
    for t in 0..cfg.iterations {
        let dir = direction(cfg.optimizer, &mut adam, &grad);
        let next_graph = soft(t + 1);
        let mut accepted = None;
        for _ in 0..=5 {
            let cand: Vec<f64> = cur.iter().zip(&dir).map(|(v, d)| (v - lr * d).clamp(lo, hi)).collect();
            match loss_and_gradient(&next_graph, &cand, &spec) {
                Ok((v, g)) if v.total.is_finite() && g.iter().all(|x| x.is_finite()) => {
                    accepted = Some((cand, v, g));
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => lr /= 2.0,
                Err(e) => return Err(e),
            }
        }
        let Some((cand, v, g)) = accepted else {
            return Err(Error::AttackAborted {
                iteration: t + 1,
                reason: format!("loss stayed non-finite after 5 learning-rate halvings; trace {trace:?}"),
            });
        };
        if cand.iter().any(|v| !(lo..=hi).contains(v)) {
            return Err(Error::ContractViolation("attack iterate left the clamp range".into()));
        }
        cur = cand;
        value = v;
        grad = g;
        trace.push(value.total);
    }
    Ok((x.with_data(cur)?, trace, lr))
}

fn finish(
    graph: &Graph,
    x: &ImageTensor,
    x_adv: ImageTensor,
    class: usize,
    cfg: &AttackConfig,
    trace: Vec<f64>,
    final_lr: f64,
) -> Result<AttackResult> {
    let e_orig = reference_explanation(graph, x, class, &cfg.explainer, &cfg.explain, cfg.seed, 0)?;
    let e_adv = reference_explanation(graph, &x_adv, class, &cfg.explainer, &cfg.explain, cfg.seed, 0)?;
    let input_mse = x.data().iter().zip(x_adv.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.data().len() as f64;
    let label_preserved = argmax(&graph.logits(&x_adv)?) == class;
    Ok(AttackResult {
        x_adv,
        trace,
        class,
        explainer: cfg.explainer.clone(),
        e_orig,
        e_adv,
        e_target: None,
        metrics: Vec::new(),
        input_mse,
        label_preserved,
        final_lr,
    })
}

/// Metric records of `target` against the original and adversarial maps.
pub fn metric_records(target: &Heatmap, orig: &Heatmap, adv: &Heatmap) -> Result<Vec<MetricRecord>> {
    Similarity::standard()
        .into_iter()
        .map(|metric| {
            let before = similarity(target, orig, metric)?;
            let after = similarity(target, adv, metric)?;
            Ok(MetricRecord {
                metric,
                before,
                after,
                diff: after - before,
            })
        })
        .collect()
}

/// Pushes the explanation of `x` (for its predicted class) towards `target`.
pub fn attack(graph: &Graph, x: &ImageTensor, target: &Heatmap, cfg: &AttackConfig) -> Result<AttackResult> {
    let (h, w) = (x.shape().height, x.shape().width);
    if target.dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}×{w} target"),
            actual: format!("{}×{}", target.height(), target.width()),
        });
    }
    let target = target.normalized(true);
    let class = graph.forward(x)?.class();
    let objective = Objective::Target(target.clone());
    let (x_adv, trace, lr) = optimize(graph, x, class, &objective, cfg)?;
    let mut r = finish(graph, x, x_adv, class, cfg, trace, lr)?;
    r.metrics = metric_records(&target, &r.e_orig, &r.e_adv)?;
    r.e_target = Some(target);
    Ok(r)
}

/// Square mask with the given side, centred in an `h`×`w` image.
pub fn centered_square(h: usize, w: usize, side: usize) -> Vec<bool> {
    let (r0, c0) = (h.saturating_sub(side) / 2, w.saturating_sub(side) / 2);
    (0..h * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)
        })
        .collect()
}

/// Minimizes the relevance inside `mask`.
pub fn attack_blank_region(graph: &Graph, x: &ImageTensor, mask: &[bool], cfg: &AttackConfig) -> Result<BlankRegionResult> {
    if mask.len() != x.shape().pixels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mask pixels", x.shape().pixels()),
            actual: mask.len().to_string(),
        });
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::invalid("blank-region mask is empty"));
    }
    let class = graph.forward(x)?.class();
    let objective = Objective::BlankRegion(mask.to_vec());
    let (x_adv, trace, lr) = optimize(graph, x, class, &objective, cfg)?;
    let r = finish(graph, x, x_adv, class, cfg, trace, lr)?;
    let inside = |e: &Heatmap| e.values().iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>();
    let (start, end) = (inside(&r.e_orig), inside(&r.e_adv));
    Ok(BlankRegionResult {
        preserved: if start > 0.0 { end / start } else { 1.0 },
        start_fraction: start,
        end_fraction: end,
        attack: r,
    })
}

/// Attacks `explainer` on `x` towards the explanation of `target_x`, then
/// scores every method in `evaluated` on the same adversarial input.
pub fn transfer_image(
    graph: &Graph,
    x: &ImageTensor,
    target_x: &ImageTensor,
    image_id: usize,
    attacked: &Explainer,
    evaluated: &[Method],
    cfg: &AttackConfig,
) -> Result<Vec<AttackRow>> {
    Ok(attack_and_evaluate(graph, x, target_x, image_id, attacked, evaluated, cfg)?.1)
}

/// As [`transfer_image`], also returning the attack itself.
pub fn attack_and_evaluate(
    graph: &Graph,
    x: &ImageTensor,
    target_x: &ImageTensor,
    image_id: usize,
    attacked: &Explainer,
    evaluated: &[Method],
    cfg: &AttackConfig,
) -> Result<(AttackResult, Vec<AttackRow>)> {
    let mut cfg = cfg.clone();
    cfg.explainer = attacked.clone();
    let target_class = graph.forward(target_x)?.class();
    let target = reference_explanation(graph, target_x, target_class, attacked, &cfg.explain, cfg.seed, image_id as u64)?;
    let result = attack(graph, x, &target, &cfg)?;
    let mut rows = Vec::new();
    for &m in evaluated {
        let single = Explainer::Single(m);
        let t = reference_explanation(graph, target_x, target_class, &single, &cfg.explain, cfg.seed, image_id as u64)?;
        let orig = reference_explanation(graph, x, result.class, &single, &cfg.explain, cfg.seed, image_id as u64)?;
        let adv = reference_explanation(graph, &result.x_adv, result.class, &single, &cfg.explain, cfg.seed, image_id as u64)?;
        for r in metric_records(&t, &orig, &adv)? {
            rows.push(AttackRow {
                image_id,
                attacked_method: attacked.id(),
                evaluated_method: m.id().into(),
                metric: r.metric.id().into(),
                value_before: r.before,
                value_after: r.after,
                metric_diff: r.diff,
                input_mse: result.input_mse,
                label_preserved: result.label_preserved,
            });
        }
    }
    Ok((result, rows))
}

/// Mean metric differences per (attacked, evaluated) pair plus every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub attacked: String,
    pub evaluated: String,
    pub mean_diff: BTreeMap<String, f64>,
    pub records: Vec<AttackRow>,
}

/// Groups per-image transfer rows into cells, in attacked × evaluated order.
pub fn transfer_cells(attacked: &[Explainer], evaluated: &[Method], rows: &[AttackRow]) -> Vec<TransferCell> {
    let mut cells = Vec::new();
    for a in attacked {
        for b in evaluated {
            let records: Vec<AttackRow> = rows
                .iter()
                .filter(|r| r.attacked_method == a.id() && r.evaluated_method == b.id())
                .cloned()
                .collect();
            let mut mean_diff = BTreeMap::new();
            for metric in Similarity::standard() {
                let vals: Vec<f64> = records.iter().filter(|r| r.metric == metric.id()).map(|r| r.metric_diff).collect();
                if !vals.is_empty() {
                    mean_diff.insert(metric.id().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            cells.push(TransferCell {
                attacked: a.id(),
                evaluated: b.id().into(),
                mean_diff,
                records,
            });
        }
    }
    cells
}

/// Runs [`transfer_image`] over `(x, target)` pairs for every attacked explainer.
pub fn transfer_matrix(
    graph: &Graph,
    pairs: &[(ImageTensor, ImageTensor)],
    attacked: &[Explainer],
    evaluated: &[Method],
    cfg: &AttackConfig,
) -> Result<Vec<TransferCell>> {
    let mut rows = Vec::new();
    for a in attacked {
        for (i, (x, t)) in pairs.iter().enumerate() {
            rows.extend(transfer_image(graph, x, t, i, a, evaluated, cfg)?);
        }
    }
    Ok(transfer_cells(attacked, evaluated, &rows))
}
