//! Training loop: Adam over mini-batches of cross-entropy, stratified
//! train/validation split, early stopping, and best-epoch restoration.
//!
//! Everything downstream of `(seed, config, dataset)` is deterministic: the
//! split, the batch order, the dropout masks, and therefore the full
//! parameter trajectory.

use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::MetricsReport;
use crate::models::Model;
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor};

/// Fixed evaluation batch size; part of the artifact's determinism contract
/// (dropout masks during stochastic evaluation depend on batch layout).
pub const EVAL_BATCH: usize = 32;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Epochs without validation-accuracy improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            patience: 5,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("adam epsilon must be > 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot<T: Element> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Element> AdamSlot<T> {
    pub fn new(len: usize) -> Self {
        AdamSlot {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update for a single tensor. `t` is the
/// already-incremented timestep (first step is `t = 1`).
pub fn adam_step<T: Element>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    slot: &mut AdamSlot<T>,
    t: u64,
    config: &TrainConfig,
) -> Result<Tensor<T>> {
    if param.shape() != grad.shape() || param.len() != slot.m.len() {
        return Err(Error::shape(format!(
            "adam shapes disagree: param {:?}, grad {:?}, state {}",
            param.shape(),
            grad.shape(),
            slot.m.len()
        )));
    }
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let one = T::one();
    let bias1 = T::from_f64(1.0 - config.beta1.powi(t as i32));
    let bias2 = T::from_f64(1.0 - config.beta2.powi(t as i32));
    let lr = T::from_f64(config.learning_rate);
    let eps = T::from_f64(config.epsilon);

    let mut out = Vec::with_capacity(param.len());
    for ((&p, &g), (m, v)) in param
        .iter()
        .zip(grad.iter())
        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
    {
        *m = beta1 * *m + (one - beta1) * g;
        *v = beta2 * *v + (one - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        out.push(p - lr * m_hat / (v_hat.sqrt() + eps));
    }
    Tensor::from_vec(param.shape().to_vec(), out)
}

/// Adam state across all trainable parameters of one model.
pub struct AdamOptimizer<T: Element> {
    slots: Vec<(String, AdamSlot<T>)>,
    t: u64,
}

impl<T: Element> AdamOptimizer<T> {
    pub fn new(model: &Model<T>) -> Self {
        let slots = model
            .params()
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.clone(), AdamSlot::new(e.value.len())))
            .collect();
        AdamOptimizer { slots, t: 0 }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// Applies one update from named gradients; parameters without a
    /// gradient this step keep their value while the timestep advances.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        grads: &[(String, Tensor<T>)],
        config: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let slot = self
                .slots
                .iter_mut()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::config(format!("no optimizer state for {name:?}")))?;
            let updated = adam_step(&model.params().get(name)?.value, grad, slot, self.t, config)?;
            model.params_mut().set(name, updated)?;
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Full fit history; `best_epoch` indexes the restored parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainHistory {
    /// CSV with header `epoch,train_loss,train_acc,val_loss,val_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        out
    }
}

/// Trains `model` in place and restores the best-validation-accuracy
/// parameters before returning.
pub fn fit<T: Element>(
    model: &mut Model<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.class_counts().iter().any(|&c| c == 0) {
        return Err(Error::data("a class has no samples in the training set"));
    }
    let split_seed = Rng::derive(config.seed, 0xA).next_u64();
    let parts = stratified_split(
        dataset,
        &[1.0 - config.val_fraction, config.val_fraction],
        split_seed,
    )?;
    let (train_set, val_set) = (&parts[0], &parts[1]);
    if train_set.class_counts().iter().any(|&c| c == 0) {
        return Err(Error::data("a class has no samples in the training split"));
    }

    let mut shuffle_rng = Rng::derive(config.seed, 0xB);
    let mut dropout_rng = Rng::derive(config.seed, 0xC);
    let mut optimizer = AdamOptimizer::new(model);

    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
    };
    let mut best_params = model.params().clone();
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch, Mode::Train, &mut dropout_rng)?;
            let loss = tape.cross_entropy_mean(pass.probs, &labels)?;
            loss_sum += tape.value(loss).data()[0].as_f64() * labels.len() as f64;
            correct += count_correct(tape.value(pass.probs), &labels);

            let grads = tape.backward(loss)?;
            let named: Vec<(String, Tensor<T>)> = pass
                .param_nodes
                .iter()
                .map(|(name, id)| {
                    let g = grads
                        .get(*id)
                        .cloned()
                        .ok_or_else(|| Error::contract(format!("missing gradient for {name:?}")))?;
                    Ok((name.clone(), g))
                })
                .collect::<Result<_>>()?;
            optimizer.step(model, &named, config)?;
            model.apply_bn_updates(&pass.bn_updates)?;
        }

        let (val_loss, val_acc) = validation_pass(model, val_set)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        };
        history.epochs.push(stats);

        if val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(history)
}

fn validation_pass<T: Element>(model: &Model<T>, val: &Dataset<T>) -> Result<(f64, f64)> {
    let mut rng = Rng::new(0); // deterministic mode consumes no randomness
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..val.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = val.batch(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| val.labels[i]).collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch, Mode::Deterministic, &mut rng)?;
        let loss = tape.cross_entropy_mean(pass.probs, &labels)?;
        loss_sum += tape.value(loss).data()[0].as_f64() * labels.len() as f64;
        correct += count_correct(tape.value(pass.probs), &labels);
    }
    Ok((
        loss_sum / val.len() as f64,
        correct as f64 / val.len() as f64,
    ))
}

fn count_correct<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax_slice(row) == label)
        .count()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax_slice<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic-mode predictions plus a metrics report.
pub struct Evaluation {
    pub predictions: Vec<usize>,
    /// Per-sample softmax rows (as f64, for ROC and reporting).
    pub probabilities: Vec<Vec<f64>>,
    pub report: MetricsReport,
}

/// Evaluates a single model in deterministic mode.
pub fn evaluate<T: Element>(model: &Model<T>, dataset: &Dataset<T>) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut rng = Rng::new(0);
    let mut probabilities: Vec<Vec<f64>> = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch(chunk)?;
        let probs = model.predict(&batch, Mode::Deterministic, &mut rng)?;
        let k = probs.shape()[1];
        for row in probs.data().chunks(k) {
            probabilities.push(row.iter().map(|v| v.as_f64()).collect());
        }
    }
    let predictions: Vec<usize> = probabilities.iter().map(|row| argmax_slice(row)).collect();
    let report = MetricsReport::new(
        &dataset.labels,
        &predictions,
        Some(&probabilities),
        dataset.num_classes(),
    )?;
    Ok(Evaluation {
        predictions,
        probabilities,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;
    use crate::models::{build_simple_cnn, ModelSpec};

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn adam_first_step_closed_form() {
        let config = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut slot = AdamSlot::new(1);
        let updated = adam_step(&scalar(0.0), &scalar(1.0), &mut slot, 1, &config).unwrap();
        // Bias correction makes the first step lr * g / (|g| + eps).
        assert!((updated.data()[0] + 0.1).abs() < 1e-8, "step {}", updated.data()[0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let config = TrainConfig::default();
        let mut slot = AdamSlot::new(1);
        let p = scalar(0.7);
        let updated = adam_step(&p, &scalar(0.0), &mut slot, 1, &config).unwrap();
        assert_eq!(updated.data()[0], 0.7);
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let config = TrainConfig::default();
        let mut slot = AdamSlot::new(1);
        let grad = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        assert!(adam_step(&scalar(0.0), &grad, &mut slot, 1, &config).is_err());
    }

    #[test]
    fn optimizer_timestep_advances_without_grads() {
        let spec = ModelSpec::simple_cnn([1, 16, 16], 3);
        let mut model = build_simple_cnn::<f32>(&spec, 1).unwrap();
        let mut opt = AdamOptimizer::new(&model);
        opt.step(&mut model, &[], &TrainConfig::default()).unwrap();
        assert_eq!(opt.timestep(), 1);
    }

    fn tiny_training_run(seed: u64, lr: f64, epochs: usize) -> (Model<f32>, TrainHistory) {
        let spec = ModelSpec::simple_cnn([1, 16, 16], 3);
        let mut model = build_simple_cnn::<f32>(&spec, 7).unwrap();
        let data = synthesize_dataset::<f32>(20, 5, 16).unwrap();
        let config = TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            seed,
            patience: 0,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &data, &config).unwrap();
        (model, history)
    }

    #[test]
    fn zero_learning_rate_keeps_trainable_params() {
        let spec = ModelSpec::simple_cnn([1, 16, 16], 3);
        let reference = build_simple_cnn::<f32>(&spec, 7).unwrap();
        let (model, _) = tiny_training_run(1, 0.0, 2);
        for (a, b) in reference
            .params()
            .entries()
            .iter()
            .zip(model.params().entries())
        {
            if a.trainable {
                assert!(a.value.bit_eq(&b.value), "{} changed at lr=0", a.name);
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (model_a, hist_a) = tiny_training_run(11, 1e-3, 2);
        let (model_b, hist_b) = tiny_training_run(11, 1e-3, 2);
        assert_eq!(hist_a.epochs.len(), hist_b.epochs.len());
        for (ea, eb) in hist_a.epochs.iter().zip(hist_b.epochs.iter()) {
            assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
            assert_eq!(ea.val_acc.to_bits(), eb.val_acc.to_bits());
        }
        for (a, b) in model_a
            .params()
            .entries()
            .iter()
            .zip(model_b.params().entries())
        {
            assert!(a.value.bit_eq(&b.value), "{} diverged", a.name);
        }
    }

    #[test]
    fn restored_model_matches_best_epoch() {
        let (model, history) = tiny_training_run(3, 1e-3, 4);
        let max = history
            .epochs
            .iter()
            .map(|e| e.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(history.best_val_acc, max);
        // Re-evaluating the restored parameters reproduces the recorded best.
        let data = synthesize_dataset::<f32>(20, 5, 16).unwrap();
        let split_seed = Rng::derive(3, 0xA).next_u64();
        let parts = stratified_split(&data, &[0.8, 0.2], split_seed).unwrap();
        let (_, val_acc) = validation_pass(&model, &parts[1]).unwrap();
        assert_eq!(val_acc, history.best_val_acc);
    }

    #[test]
    fn gradient_reaches_every_layer() {
        let spec = ModelSpec::fusenet([1, 32, 32], 3);
        let mut model = crate::models::build_fusenet::<f32>(&spec, 5).unwrap();
        let before = model.params().clone();
        let data = synthesize_dataset::<f32>(4, 9, 32).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 12,
            patience: 0,
            val_fraction: 0.25,
            seed: 2,
            ..TrainConfig::default()
        };
        fit(&mut model, &data, &config).unwrap();

        // Group parameters by layer prefix; every layer must have moved.
        use std::collections::BTreeMap;
        let mut layer_changed: BTreeMap<String, bool> = BTreeMap::new();
        for (old, new) in before.entries().iter().zip(model.params().entries()) {
            if !old.trainable {
                continue;
            }
            let layer = old.name.rsplit_once('.').map(|(p, _)| p).unwrap_or(&old.name);
            let changed = !old.value.bit_eq(&new.value);
            *layer_changed.entry(layer.to_string()).or_insert(false) |= changed;
        }
        for (layer, changed) in &layer_changed {
            assert!(changed, "no parameter changed in layer {layer}");
        }
        assert!(layer_changed.keys().any(|l| l.starts_with("branch1")));
        assert!(layer_changed.keys().any(|l| l.starts_with("backbone")));
    }

    #[test]
    fn fit_rejects_missing_class() {
        let spec = ModelSpec::simple_cnn([1, 16, 16], 3);
        let mut model = build_simple_cnn::<f32>(&spec, 1).unwrap();
        let data = synthesize_dataset::<f32>(10, 5, 16).unwrap();
        // Keep only classes 0 and 1.
        let keep: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != 2).collect();
        let broken = data.subset(&keep).unwrap();
        assert!(fit(&mut model, &broken, &TrainConfig::default()).is_err());
    }

    #[test]
    fn loss_history_stays_finite() {
        let (_, history) = tiny_training_run(13, 1e-3, 3);
        for e in &history.epochs {
            assert!(e.train_loss.is_finite());
            assert!(e.val_loss.is_finite());
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (model, _) = tiny_training_run(17, 1e-3, 2);
        let test = synthesize_dataset::<f32>(10, 77, 16).unwrap();
        let a = evaluate(&model, &test).unwrap();
        let b = evaluate(&model, &test).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.report.weighted.accuracy, b.report.weighted.accuracy);
    }

    #[test]
    fn history_csv_shape() {
        let (_, history) = tiny_training_run(19, 1e-3, 2);
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,val_loss,val_acc"));
        assert_eq!(lines.count(), history.epochs.len());
    }
}
