//! AdamW with decoupled weight decay, model initialization, and the
//! per-episode training loop with early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{derive_rng, FeatureRecord, ResolvedEpisode};
use crate::error::{Error, Result};
use crate::harness::accuracy;
use crate::heads::cross_entropy;
use crate::model::{batch_loss_and_grad, cma_forward, CmaModel, ModelConfig, Variant};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// See [`init_model`].
    #[default]
    Uniform,
    /// Every parameter zero; the model predicts [0.5, 0.5] everywhere.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub init_seed: u64,
    #[serde(default)]
    pub init: InitScheme,
    /// Sample a disjoint n-shot validation split and keep the best epoch.
    /// Without it the last epoch is kept.
    pub use_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            max_epochs: 20,
            patience: 3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            init_seed: 0,
            init: InitScheme::Uniform,
            use_validation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        // A zero learning rate is allowed: it freezes the model, which is
        // how the frozen-initialization baselines are run.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay must be in [0, 1), got {}", self.weight_decay));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "patience must be in [1, max_epochs={}], got {}",
                self.max_epochs, self.patience
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(model: &CmaModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .blocks()
            .iter()
            .map(|b| vec![0.0; b.data.len()])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One decoupled AdamW update of a single buffer at (1-based) `step`:
/// `w -= lr * (m̂ / (√v̂ + eps) + weight_decay * w)`.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
) {
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(first).zip(second) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
    }
}

/// Applies one AdamW step to every parameter block. Nothing is modified
/// if any gradient is non-finite.
pub fn adamw_step(
    model: &mut CmaModel,
    grads: &CmaModel,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    if grad_blocks.len() != state.first.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} blocks, gradients have {}",
            state.first.len(),
            grad_blocks.len()
        )));
    }
    for (g, m) in grad_blocks.iter().zip(&state.first) {
        if g.data.len() != m.len() {
            return Err(Error::Dimension(format!(
                "gradient block {} has {} values, optimizer expects {}",
                g.name,
                g.data.len(),
                m.len()
            )));
        }
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in block {} at index {i}",
                g.name
            )));
        }
    }
    state.step += 1;
    let step = state.step;
    for (((p, g), m), v) in model
        .blocks_mut()
        .into_iter()
        .zip(&grad_blocks)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        adamw_update(p.data, g.data, m, v, step, cfg);
    }
    Ok(())
}

/// Attention projection noise scale around the identity.
pub const ATTENTION_INIT_NOISE: f64 = 1e-2;

/// Deterministic initialization keyed by `seed`: weights uniform in
/// `±1/√fan_in`, biases zero, attention projections identity plus uniform
/// noise of scale [`ATTENTION_INIT_NOISE`].
pub fn init_model(d: usize, variant: Variant, config: ModelConfig, seed: u64) -> Result<CmaModel> {
    let mut model = CmaModel::zeros(d, variant, config)?;
    let mut rng = derive_rng("cma/init", seed, &[]);
    for block in model.blocks_mut() {
        if block.name.starts_with("attn_") {
            for r in 0..block.rows {
                for c in 0..block.cols {
                    let base = if r == c { 1.0 } else { 0.0 };
                    block.data[r * block.cols + c] =
                        base + rng.random_range(-ATTENTION_INIT_NOISE..ATTENTION_INIT_NOISE);
                }
            }
        } else if !block.name.ends_with(".bias") {
            let bound = 1.0 / (block.rows as f64).sqrt();
            for w in block.data.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
    }
    Ok(model)
}

pub fn initialize(
    scheme: InitScheme,
    d: usize,
    variant: Variant,
    config: ModelConfig,
    seed: u64,
) -> Result<CmaModel> {
    match scheme {
        InitScheme::Uniform => init_model(d, variant, config, seed),
        InitScheme::Zero => CmaModel::zeros(d, variant, config),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each epoch, measured on the
    /// mini-batches before their update.
    pub train_loss: Vec<f64>,
    /// Empty when training ran without a validation split.
    pub val_accuracy: Vec<f64>,
    /// Mean cross-entropy of the final prediction on the validation split.
    #[serde(default)]
    pub val_loss: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn epochs_ran(&self) -> usize {
        self.train_loss.len()
    }
}

/// Predicted labels for `records`.
pub fn predict_labels(model: &CmaModel, records: &[&FeatureRecord]) -> Result<Vec<u8>> {
    records
        .iter()
        .map(|r| cma_forward(r, model).map(|p| p.label()))
        .collect()
}

pub fn evaluate_accuracy(model: &CmaModel, records: &[&FeatureRecord]) -> Result<f64> {
    let predicted = predict_labels(model, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    accuracy(&predicted, &labels)
}

/// Accuracy and mean cross-entropy of the final prediction.
pub fn evaluate(model: &CmaModel, records: &[&FeatureRecord]) -> Result<(f64, f64)> {
    let mut predicted = Vec::with_capacity(records.len());
    let mut loss = 0.0;
    for r in records {
        let p = cma_forward(r, model)?;
        loss += cross_entropy(r.label, &p.y_hat)?;
        predicted.push(p.label());
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    Ok((accuracy(&predicted, &labels)?, loss / records.len() as f64))
}

/// Trains `model` on the episode's train split.
///
/// Each epoch visits the train records in a shuffled order, in mini-batches
/// of `min(batch_size, train size)`. The shuffle stream is keyed by the
/// episode seed. With a validation split, the snapshot with the highest
/// validation accuracy is returned (earliest on ties) and training stops
/// after `patience` epochs without improvement. An epoch improves when it
/// raises the best validation accuracy, or matches it with a lower
/// validation loss than any epoch at that accuracy so far; the second case
/// resets patience without moving the returned snapshot.
pub fn train_episode(
    episode: &ResolvedEpisode<'_>,
    model: CmaModel,
    cfg: &TrainConfig,
) -> Result<(CmaModel, TrainHistory)> {
    cfg.validate()?;
    if episode.train.is_empty() {
        return Err(Error::InvalidInput("episode has an empty train set".into()));
    }
    let mut model = model;
    let mut state = AdamWState::new(&model);
    let mut rng = derive_rng("cma/shuffle", episode.seed, &[]);
    let batch = cfg.batch_size.min(episode.train.len());
    let mut order: Vec<usize> = (0..episode.train.len()).collect();

    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.max_epochs),
        val_accuracy: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::Completed,
    };
    let mut best: Option<(f64, CmaModel)> = None;
    let mut best_loss_at_best_acc = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let records: Vec<&FeatureRecord> = chunk.iter().map(|&i| episode.train[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&records, &model)?;
            adamw_step(&mut model, &grads, &mut state, cfg)?;
            epoch_loss += loss * records.len() as f64;
        }
        history.train_loss.push(epoch_loss / episode.train.len() as f64);

        if episode.val.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let (acc, val_loss) = evaluate(&model, &episode.val)?;
        history.val_accuracy.push(acc);
        history.val_loss.push(val_loss);
        let best_acc = best.as_ref().map(|(b, _)| *b);
        if best_acc.is_none_or(|b| acc > b) {
            best = Some((acc, model.clone()));
            best_loss_at_best_acc = val_loss;
            history.best_epoch = epoch;
            since_best = 0;
        } else if best_acc == Some(acc) && val_loss < best_loss_at_best_acc {
            best_loss_at_best_acc = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if !model.is_finite() {
        return Err(Error::Numeric("training produced non-finite parameters".into()));
    }
    let trained = match best {
        Some((_, snapshot)) => snapshot,
        None => model,
    };
    Ok((trained, history))
}
