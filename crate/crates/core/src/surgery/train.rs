use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FreezeMask, MaskProvenance};
use crate::bench::metrics::{compute_metric, MetricKind};
use crate::error::{config_err, input_err, Error, Result};
use crate::exec::ExecPolicy;
use crate::model::{Example, Label, ModelHandle, ParameterSnapshot};

/// Fine-tuning hyperparameters. Defaults: batch 16, eval batch 16,
/// learning rate 5e-5, 10 epochs, weight decay 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_epochs: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    #[serde(skip)]
    pub exec: ExecPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            eval_batch_size: 16,
            learning_rate: 5e-5,
            epochs: 10,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_epochs: vec![0, 2, 5, 8, 10],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            exec: ExecPolicy::default(),
        }
    }
}

pub const OPTIMIZER: &str = "adamw(decoupled weight decay, constant lr)";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return Err(config_err("batch sizes and epochs must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(config_err("learning rate must be positive and weight decay non-negative"));
        }
        if let Some(e) = self.checkpoint_epochs.iter().find(|e| **e > self.epochs) {
            return Err(config_err(format!(
                "checkpoint epoch {e} beyond the {} training epochs",
                self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplits {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDigest {
    pub epoch: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task_id: String,
    pub variant: String,
    pub mask: MaskProvenance,
    pub trainable_groups: Vec<String>,
    pub metric: MetricKind,
    pub final_metric: f64,
    pub final_train_metric: f64,
    /// Mean training loss per epoch (index 0 = epoch 1).
    pub train_loss: Vec<f64>,
    /// Eval metric before training (index 0) and after each epoch.
    pub eval_metric: Vec<f64>,
    pub initial_digest: String,
    pub checkpoints: Vec<CheckpointDigest>,
    pub optimizer: String,
    pub wall_clock_ms: u128,
    pub warnings: Vec<String>,
}

/// A finished trial with its in-memory checkpoints and final model.
#[derive(Debug, Clone)]
pub struct Trial {
    pub result: TrialResult,
    pub checkpoints: Vec<(usize, ParameterSnapshot)>,
    pub model: ModelHandle,
}

/// Evaluates `metric` of `model` on `data`.
pub fn evaluate(model: &ModelHandle, data: &[Example], metric: MetricKind, exec: ExecPolicy) -> Result<f64> {
    let preds: Vec<f64> = exec
        .map(data, |_, ex| model.predict(&ex.features))
        .into_iter()
        .collect::<Result<_>>()?;
    let labels: Vec<f64> = data
        .iter()
        .map(|ex| match ex.label {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        })
        .collect();
    match compute_metric(metric, &preds, &labels) {
        // constant predictions early in training
        Err(Error::Input(msg)) if metric == MetricKind::Pearson && msg.contains("zero-variance") => Ok(0.0),
        other => other,
    }
}

/// Trains the groups marked trainable by `mask` with AdamW; frozen groups
/// are never written.
pub fn finetune(
    model: &ModelHandle,
    mask: &FreezeMask,
    data: &DataSplits,
    config: &TrainConfig,
    metric: MetricKind,
    task_id: &str,
    variant: &str,
) -> Result<Trial> {
    config.validate()?;
    mask.check(model.partition())?;
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(input_err("train and eval splits must be non-empty"));
    }
    if !metric.compatible_with(model.task_kind()) {
        return Err(config_err(format!("metric {metric:?} incompatible with task")));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let spans = mask.trainable_spans(model.partition());
    let initial = model.snapshot();
    let mut checkpoints = Vec::new();
    if config.checkpoint_epochs.contains(&0) {
        checkpoints.push((0, initial.clone()));
    }

    let n_params = model.num_params();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut eval_metric = vec![evaluate(&model, &data.eval, metric, config.exec)?];

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, g) = model.loss_and_grad(&data.train[i])?;
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let group = grad
                    .iter()
                    .position(|g| !g.is_finite())
                    .and_then(|i| model.partition().group_of(i))
                    .map(|id| model.partition().group(id).name.clone())
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    group,
                });
            }
            epoch_loss += batch_loss;
            step += 1;
            let bc1 = 1.0 - config.beta1.powi(step);
            let bc2 = 1.0 - config.beta2.powi(step);
            let decay = 1.0 - config.learning_rate * config.weight_decay;
            let params = model.params_mut().values_mut();
            for span in &spans {
                for i in span.clone() {
                    let g = grad[i] * inv;
                    m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
                    m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g * g;
                    let update = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + config.adam_eps);
                    params[i] = params[i] * decay - config.learning_rate * update;
                }
            }
        }
        train_loss.push(epoch_loss / data.train.len() as f64);
        eval_metric.push(evaluate(&model, &data.eval, metric, config.exec)?);
        if config.checkpoint_epochs.contains(&epoch) {
            checkpoints.push((epoch, model.snapshot()));
        }
    }

    let final_train_metric = evaluate(&model, &data.train, metric, config.exec)?;
    let result = TrialResult {
        task_id: task_id.to_string(),
        variant: variant.to_string(),
        mask: mask.provenance.clone(),
        trainable_groups: mask.trainable_group_names(model.partition()),
        metric,
        final_metric: *eval_metric.last().unwrap(),
        final_train_metric,
        train_loss,
        eval_metric,
        initial_digest: initial.content_digest.clone(),
        checkpoints: checkpoints
            .iter()
            .map(|(epoch, s)| CheckpointDigest {
                epoch: *epoch,
                digest: s.content_digest.clone(),
            })
            .collect(),
        optimizer: OPTIMIZER.to_string(),
        wall_clock_ms: started.elapsed().as_millis(),
        warnings: Vec::new(),
    };
    Ok(Trial {
        result,
        checkpoints,
        model,
    })
}
