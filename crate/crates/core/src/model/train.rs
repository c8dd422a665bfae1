use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, Checkpoint, TrainingMetadata};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{argmax, param_gradients, softmax, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Trailing fraction of the training set held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
            batch_size: 128,
            max_epochs: 30,
            patience: 3,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::invalid("patience must be ≥ 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and max epochs must be ≥ 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("Adadelta needs 0 < ρ < 1, ε > 0 and a positive learning rate"));
        }
        Ok(())
    }
}

/// Adadelta with a learning-rate multiplier:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1 − ρ) g²
/// Δ     = g · √(E[Δ²] + ε) / √(E[g²] + ε)
/// θ     ← θ − lr · Δ
/// E[Δ²] ← ρ E[Δ²] + (1 − ρ) Δ²
/// ```
#[derive(Clone, Debug)]
pub struct Adadelta {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    acc_grad: Vec<Vec<f64>>,
    acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64, blob_lengths: &[usize]) -> Self {
        Self {
            learning_rate,
            rho,
            epsilon,
            acc_grad: blob_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            acc_update: blob_lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        let (rho, eps, lr) = (self.rho, self.epsilon, self.learning_rate);
        for (((p, g), ag), au) in params.into_iter().zip(grads).zip(&mut self.acc_grad).zip(&mut self.acc_update) {
            for i in 0..p.len() {
                ag[i] = rho * ag[i] + (1.0 - rho) * g[i] * g[i];
                let delta = g[i] * (au[i] + eps).sqrt() / (ag[i] + eps).sqrt();
                p[i] -= lr * delta;
                au[i] = rho * au[i] + (1.0 - rho) * delta * delta;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Mean cross-entropy and accuracy of `graph` on `data`.
pub fn evaluate_loss(graph: &Graph, data: &Dataset) -> Result<(f64, f64)> {
    let k = graph.num_classes();
    let len = data.shape().len();
    let (mut loss, mut hits) = (0.0, 0usize);
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let mut xs = Vec::with_capacity((end - start) * len);
        for i in start..end {
            xs.extend_from_slice(data.pixels(i));
        }
        let logits = graph.logits_batch(&xs, end - start)?;
        for (row, i) in logits.chunks(k).zip(start..end) {
            loss += cross_entropy(row, data.label(i));
            hits += usize::from(argmax(row) == data.label(i));
        }
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn train(arch: &Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(arch, data, cfg, |_| {})
}

/// Mini-batch training with early stopping on the held-out tail of `data`.
/// The returned weights are those of the epoch with the lowest validation
/// loss; `on_epoch` sees each epoch's record as it completes.
pub fn train_with(
    arch: &Architecture,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.shape() != arch.input {
        return Err(Error::ShapeMismatch {
            expected: arch.input.to_string(),
            actual: data.shape().to_string(),
        });
    }
    let n_val = ((data.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
    if n_val >= data.len() {
        return Err(Error::invalid(format!("{} samples leave nothing to train on", data.len())));
    }
    let n_train = data.len() - n_val;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val = data.select(&(n_train..data.len()).collect::<Vec<_>>());

    let mut graph = arch.compile(cfg.seed)?;
    let k = graph.num_classes();
    if let Some(&bad) = data.labels().iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} ≥ {k} model outputs")));
    }
    let lengths: Vec<usize> = graph.params().iter().map(|p| p.len()).collect();
    let mut opt = Adadelta::new(cfg.learning_rate, cfg.rho, cfg.epsilon, &lengths);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let len = data.shape().len();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut order = train_idx;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(batch.len() * len);
            for &i in batch {
                xs.extend_from_slice(data.pixels(i));
            }
            let tape = match graph.record_batch(&xs, batch.len(), Some(&mut rng)) {
                Ok(t) => t,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged { epoch, batch: b, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            let mut seed = Vec::with_capacity(batch.len() * k);
            let mut batch_loss = 0.0;
            for (j, &i) in batch.iter().enumerate() {
                let row = tape.sample_logits(j);
                let label = data.label(i);
                batch_loss += cross_entropy(row, label);
                let p = softmax(row);
                seed.extend(p.iter().enumerate().map(|(c, q)| (q - f64::from(u8::from(c == label))) / batch.len() as f64));
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: batch_loss });
            }
            loss_sum += batch_loss * batch.len() as f64;
            let grads = param_gradients(&graph, &tape, seed)?;
            opt.step(graph.params_mut(), &grads);
        }
        let (val_loss, val_accuracy) = evaluate_loss(&graph, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: usize::MAX, loss: val_loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, graph.params().iter().map(|p| p.to_vec()).collect()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    let graph = arch.with_params(params)?;
    Ok(Checkpoint {
        architecture: arch.clone(),
        graph,
        metadata: TrainingMetadata {
            dataset: data.name.clone(),
            seed: cfg.seed,
            epochs: history.len(),
            best_epoch,
            final_accuracy: None,
            config: Some(cfg.clone()),
            history,
        },
    })
}
