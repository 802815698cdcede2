//! Losses, the AdamW optimizer, the curriculum training loop, and the
//! evaluation metrics (dice coefficient, accuracy).

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, LoadedSample, SampleRef};
use crate::graph::{Arr, TensorId};
use crate::model::{Model, ModelError};
use crate::nn::{ParamStore, Session};
use crate::prompts::{encode_prompt_set, PromptError, TaskPrompt};

pub const DICE_SMOOTHING: f64 = 1.0;

/// Fixed mixing ratio of the segmentation loss: 0.4 cross-entropy, 0.6 dice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce_weight: 0.4,
            dice_weight: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub prompt_enabled: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Cosine decay of the learning rate; constant rate when off.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Apply the flip/rotate/crop augmentation during training.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Stop once train dice and accuracy both reach these targets
    /// (checked on the training split after each epoch).
    #[serde(default)]
    pub stop_at_train_metrics: Option<(f64, f64)>,
}

fn default_true() -> bool {
    true
}
fn default_learning_rate() -> f64 {
    3e-4
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    8
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 200,
            batch_size: 8,
            weight_decay: 1e-4,
            seed: 0,
            prompt_enabled: true,
            loss_weights: LossWeights::default(),
            cosine_decay: false,
            augment: true,
            stop_at_train_metrics: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        let w = self.loss_weights;
        if w.ce_weight < 0.0 || w.dice_weight < 0.0 || (w.ce_weight + w.dice_weight - 1.0).abs() > 1e-9 {
            return Err(TrainError::InvalidConfig(
                "loss weights must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: predictions {predictions}, labels {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (task {task}, first record {record})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        task: String,
        record: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

// ---------------------------------------------------------------------------
// plain (non-graph) losses and metrics — these are the reference definitions
// the differentiable versions are tested against
// ---------------------------------------------------------------------------

/// `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)` with `eps = 1`.
pub fn dice_loss(probs: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<f64, TrainError> {
    if probs.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "probs {:?} vs target {:?}",
            probs.dim(),
            target.dim()
        )));
    }
    let inter: f64 = probs.iter().zip(target.iter()).map(|(p, t)| p * t).sum();
    let denom: f64 = probs.sum() + target.sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTHING) / (denom + DICE_SMOOTHING))
}

/// Mean softmax negative log-likelihood of `logits [N, K]` against labels.
pub fn cross_entropy_loss(logits: &ArrayView2<f64>, targets: &[usize]) -> Result<f64, TrainError> {
    let (n, k) = logits.dim();
    if n != targets.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{n} logit rows vs {} targets",
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t >= k {
            return Err(TrainError::ShapeMismatch(format!("label {t} out of range {k}")));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / n as f64)
}

/// Per-pixel combined loss on `logits [H*W, 2]` against a binary mask:
/// `ce_weight * CE + dice_weight * dice(softmax foreground)`.
pub fn segmentation_loss(
    logits: &ArrayView2<f64>,
    mask: &ArrayView2<f64>,
    weights: LossWeights,
) -> Result<f64, TrainError> {
    let (h, w) = mask.dim();
    if logits.dim().0 != h * w || logits.dim().1 != 2 {
        return Err(TrainError::ShapeMismatch(format!(
            "logits {:?} vs mask {h}x{w}",
            logits.dim()
        )));
    }
    let targets: Vec<usize> = mask.iter().map(|&v| if v > 0.5 { 1 } else { 0 }).collect();
    let ce = cross_entropy_loss(logits, &targets)?;
    let mut fg = Array2::<f64>::zeros((h, w));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        fg[[i / w, i % w]] = e1 / (e0 + e1);
    }
    let dice = dice_loss(&fg.view(), &mask.view())?;
    Ok(weights.ce_weight * ce + weights.dice_weight * dice)
}

/// `2|P ∩ T| / (|P| + |T|)`, defined as 1.0 when both masks are empty.
pub fn dice_coefficient(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<f64, TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let p: usize = pred.iter().filter(|&&v| v > 0.5).count();
    let t: usize = target.iter().filter(|&&v| v > 0.5).count();
    if p + t == 0 {
        return Ok(1.0);
    }
    let inter = pred
        .iter()
        .zip(target.iter())
        .filter(|(&a, &b)| a > 0.5 && b > 0.5)
        .count();
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64, TrainError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            argmax == l
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// differentiable losses
// ---------------------------------------------------------------------------

/// Graph version of [`segmentation_loss`] over a batch: per-sample dice on
/// the softmax foreground channel plus per-pixel cross-entropy.
pub fn seg_loss_graph(
    s: &mut Session,
    logits: TensorId, // [B*H*W, 2]
    masks: &[&Array2<f64>],
    weights: LossWeights,
) -> TensorId {
    let b = masks.len();
    let (h, w) = masks[0].dim();
    let npix = h * w;
    let mut targets = Vec::with_capacity(b * npix);
    let mut flat_masks = Vec::with_capacity(b * npix);
    for m in masks {
        for &v in m.iter() {
            targets.push(if v > 0.5 { 1usize } else { 0 });
            flat_masks.push(if v > 0.5 { 1.0 } else { 0.0 });
        }
    }
    let ce = s.tape.softmax_cross_entropy(logits, &targets);

    let probs = s.tape.softmax_last(logits);
    let fg_map: std::rc::Rc<Vec<usize>> =
        std::rc::Rc::new((0..b * npix).map(|i| i * 2 + 1).collect());
    let fg = s.tape.gather(probs, &[b, npix], fg_map);
    let mask_node = s
        .tape
        .leaf(ArrayD::from_shape_vec(IxDyn(&[b, npix]), flat_masks).unwrap());
    let inter = s.tape.mul(fg, mask_node);
    let inter = s.tape.sum_axis(inter, 1); // [B]
    let psum = s.tape.sum_axis(fg, 1);
    let tsum = s.tape.sum_axis(mask_node, 1);
    let num = s.tape.mul_scalar(inter, 2.0);
    let num = s.tape.add_scalar(num, DICE_SMOOTHING);
    let den = s.tape.add(psum, tsum);
    let den = s.tape.add_scalar(den, DICE_SMOOTHING);
    let frac = s.tape.div(num, den);
    let dice = s.tape.mul_scalar(frac, -1.0);
    let dice = s.tape.add_scalar(dice, 1.0);
    let dice = s.tape.mean_axis(dice, 0);

    let ce_t = s.tape.mul_scalar(ce, weights.ce_weight);
    let dice_t = s.tape.mul_scalar(dice, weights.dice_weight);
    let total = s.tape.add(ce_t, dice_t);
    s.tape.reshape(total, &[])
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// AdamW: adaptive moments with decoupled weight decay.
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Arr, Arr)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update to every trainable parameter with a gradient.
    /// `lr_scale` multiplies the base rate (for schedules).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>, lr_scale: f64) {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.learning_rate * lr_scale;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            // decoupled weight decay
            param.data.mapv_inplace(|p| p - lr * self.weight_decay * p);
            ndarray::Zip::from(&mut param.data)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One epoch's record in the history file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_loss: Option<f64>,
    pub cls_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose validation score (mean of dice and accuracy) was best.
    pub best_epoch: Option<usize>,
}

/// Dice / accuracy of a model over a list of samples, no parameter updates.
pub struct EvalMetrics {
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
    pub seg_count: usize,
    pub cls_count: usize,
}

impl EvalMetrics {
    /// Mean of the metrics that are present.
    pub fn combined(&self) -> f64 {
        match (self.dice, self.accuracy) {
            (Some(d), Some(a)) => 0.5 * (d + a),
            (Some(d), None) => d,
            (None, Some(a)) => a,
            (None, None) => 0.0,
        }
    }
}

/// Evaluate segmentation dice (mean over masked samples) and classification
/// accuracy (over labelled samples) on a fixed parameter snapshot.
pub fn evaluate(model: &Model, samples: &[LoadedSample]) -> Result<EvalMetrics, TrainError> {
    let mut dices = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for sample in samples {
        if let Some(mask) = &sample.mask {
            let out = model.forward(&sample.image, &sample.prompt(TaskPrompt::Segmentation)?)?;
            let logits = out.seg_logits.unwrap();
            let (_, h, w) = logits.dim();
            let mut pred = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    pred[[y, x]] = if logits[[1, y, x]] > logits[[0, y, x]] { 1.0 } else { 0.0 };
                }
            }
            dices.push(dice_coefficient(&pred.view(), &mask.view())?);
        }
        if let Some(label) = sample.class_label {
            let out = model.forward(&sample.image, &sample.prompt(TaskPrompt::Classification)?)?;
            preds.push(out.cls_logits.unwrap().to_vec());
            labels.push(label);
        }
    }
    let dice = if dices.is_empty() {
        None
    } else {
        Some(dices.iter().sum::<f64>() / dices.len() as f64)
    };
    let acc = if preds.is_empty() {
        None
    } else {
        Some(accuracy(&preds, &labels)?)
    };
    Ok(EvalMetrics {
        dice,
        accuracy: acc,
        seg_count: dices.len(),
        cls_count: labels.len(),
    })
}

/// Forward + loss for one homogeneous batch; returns the scalar loss node.
fn batch_loss(
    model: &Model,
    s: &mut Session,
    samples: &[&LoadedSample],
    task: TaskPrompt,
    weights: LossWeights,
) -> Result<TensorId, TrainError> {
    let b = samples.len();
    let n = model.config.image_size;
    let mut flat = Vec::with_capacity(b * n * n);
    for sm in samples {
        flat.extend(sm.image.iter().copied());
    }
    let images = s
        .tape
        .leaf(ArrayD::from_shape_vec(IxDyn(&[b, n, n]), flat).unwrap());
    let prompts: Result<Vec<_>, PromptError> = samples
        .iter()
        .map(|sm| sm.prompt(task).map(|p| encode_prompt_set(&p)))
        .collect();
    let rows = model.prompt_rows(s, &prompts?)?;
    let (stage_outs, bottleneck) = model.build_encoder(s, images);
    match task {
        TaskPrompt::Segmentation => {
            let logits = model.build_seg_decoder(s, &stage_outs, bottleneck, rows);
            let masks: Vec<&Array2<f64>> = samples.iter().map(|sm| sm.mask.as_ref().unwrap()).collect();
            Ok(seg_loss_graph(s, logits, &masks, weights))
        }
        TaskPrompt::Classification => {
            let logits = model.build_cls_decoder(s, bottleneck, rows);
            let labels: Vec<usize> = samples.iter().map(|sm| sm.class_label.unwrap()).collect();
            Ok(s.tape.softmax_cross_entropy(logits, &labels))
        }
    }
}

/// Resolve batch refs, augmenting when configured.
fn materialize<'a>(
    dataset: &'a Dataset,
    refs: &[SampleRef],
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Vec<LoadedSample> {
    refs.iter()
        .enumerate()
        .map(|(j, r)| {
            let sample = dataset.sample(r);
            if cfg.augment {
                let seed = cfg
                    .seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add((epoch as u64) << 32)
                    .wrapping_add((batch as u64) << 16)
                    .wrapping_add(j as u64);
                crate::data::augment_sample(sample, seed)
            } else {
                sample.clone()
            }
        })
        .collect()
}

/// Train `model` in place: one balanced, curriculum-ordered plan per epoch,
/// AdamW updates, per-epoch validation, best-checkpoint tracking.
///
/// Deterministic given the seed; loss histories of same-seed runs are
/// bit-identical.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainHistory, ParamStore), TrainError> {
    cfg.validate()?;
    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut history = TrainHistory::default();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_add(1 + epoch as u64);
        let plan = dataset.epoch_plan(cfg.batch_size, epoch_seed)?;
        let lr_scale = if cfg.cosine_decay {
            0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
        } else {
            1.0
        };

        let mut seg_losses = Vec::new();
        let mut cls_losses = Vec::new();
        for (bi, batch) in plan.batches.iter().enumerate() {
            let samples = materialize(dataset, &batch.records, cfg, epoch, bi);
            let sample_refs: Vec<&LoadedSample> = samples.iter().collect();
            let grads;
            let loss_value;
            {
                let mut s = Session::new(&model.params);
                let loss = batch_loss(model, &mut s, &sample_refs, batch.task, cfg.loss_weights)?;
                loss_value = s.tape.scalar(loss);
                if !loss_value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        task: batch.task.name().to_string(),
                        record: batch.records[0].record_id.clone(),
                    });
                }
                let g = s.tape.backward(loss);
                let mut named = BTreeMap::new();
                for (name, &leaf) in s.param_leaves() {
                    if let Some(grad) = g.get(leaf) {
                        named.insert(name.clone(), grad.clone());
                    }
                }
                grads = named;
            }
            optimizer.step(&mut model.params, &grads, lr_scale);
            match batch.task {
                TaskPrompt::Segmentation => seg_losses.push(loss_value),
                TaskPrompt::Classification => cls_losses.push(loss_value),
            }
        }

        let val_metrics = if dataset.val.is_empty() {
            None
        } else {
            Some(evaluate(model, &dataset.val)?)
        };
        let record = EpochRecord {
            epoch,
            seg_loss: mean_of(&seg_losses),
            cls_loss: mean_of(&cls_losses),
            val_dice: val_metrics.as_ref().and_then(|m| m.dice),
            val_accuracy: val_metrics.as_ref().and_then(|m| m.accuracy),
        };
        history.epochs.push(record);

        if let Some(m) = &val_metrics {
            let score = m.combined();
            if score > best_score {
                best_score = score;
                best_epoch_update(&mut history, epoch);
                best_params = model.params.clone();
            }
        } else {
            best_epoch_update(&mut history, epoch);
            best_params = model.params.clone();
        }

        if let Some((dice_target, acc_target)) = cfg.stop_at_train_metrics {
            let m = evaluate(model, &dataset.train)?;
            let dice_ok = m.dice.map_or(true, |d| d >= dice_target);
            let acc_ok = m.accuracy.map_or(true, |a| a >= acc_target);
            if dice_ok && acc_ok {
                break;
            }
        }
    }
    Ok((history, best_params))
}

fn best_epoch_update(history: &mut TrainHistory, epoch: usize) {
    history.best_epoch = Some(epoch);
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests;
