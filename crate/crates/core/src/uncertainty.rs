//! Ensemble Monte Carlo dropout: repeated stochastic forward passes whose
//! averaged softmax output is the prediction and whose per-class spread is
//! the uncertainty estimate.
//!
//! A run is `E` independently trained models times `T` stochastic passes
//! each, `N = E * T` passes total. Pass `p` draws its dropout masks from a
//! stream derived from `(base_seed, p)`, so results are reproducible and
//! the passes could run in any order (aggregation happens in pass-index
//! order to keep bit reproducibility). Batch normalization stays on running
//! statistics during these passes: all stochasticity comes from the dropout
//! masks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::MetricsReport;
use crate::models::Model;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};
use crate::train::{argmax_slice, Evaluation, EVAL_BATCH};

/// Ensemble geometry: `num_models` trained models, `passes_per_model`
/// stochastic passes each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub num_models: usize,
    pub passes_per_model: usize,
    pub base_seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            num_models: 5,
            passes_per_model: 10,
            base_seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn new(num_models: usize, passes_per_model: usize, base_seed: u64) -> Self {
        EnsembleConfig {
            num_models,
            passes_per_model,
            base_seed,
        }
    }

    /// Total passes `N = E * T`.
    pub fn total_passes(&self) -> usize {
        self.num_models * self.passes_per_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_models == 0 || self.passes_per_model == 0 {
            return Err(Error::config(format!(
                "ensemble needs at least 1 model and 1 pass, got {} x {}",
                self.num_models, self.passes_per_model
            )));
        }
        Ok(())
    }

    /// The dropout stream for pass index `p`.
    pub fn pass_rng(&self, pass: usize) -> Rng {
        Rng::derive(self.base_seed, pass as u64)
    }
}

/// Aggregated prediction for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveSummary {
    /// Per-class mean of the softmax outputs over all passes.
    pub class_mean: Vec<f64>,
    /// Per-class population standard deviation over passes (divisor `N`).
    pub class_std: Vec<f64>,
    /// Entropy of `class_mean` in nats.
    pub entropy: f64,
    /// `argmax(class_mean)`, lowest index on ties.
    pub predicted_class: usize,
    pub num_passes: usize,
}

/// Entropy of a probability vector in nats, with `0 ln 0 := 0`.
pub fn predictive_entropy(class_mean: &[f64]) -> Result<f64> {
    let total: f64 = class_mean.iter().sum();
    if (total - 1.0).abs() > 1e-6 || class_mean.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
        return Err(Error::contract(format!(
            "entropy expects a probability vector, got sum {total}"
        )));
    }
    Ok(class_mean
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Aggregates stored pass outputs `[N][K]` into a summary.
pub fn summarize_passes(passes: &[Vec<f64>]) -> Result<PredictiveSummary> {
    let n = passes.len();
    if n == 0 {
        return Err(Error::config("cannot summarize zero passes"));
    }
    let k = passes[0].len();
    if passes.iter().any(|p| p.len() != k) {
        return Err(Error::shape("ragged pass outputs"));
    }
    let mut class_mean = vec![0.0f64; k];
    for pass in passes {
        for (m, &p) in class_mean.iter_mut().zip(pass) {
            *m += p;
        }
    }
    for m in class_mean.iter_mut() {
        *m /= n as f64;
    }
    let mut class_std = vec![0.0f64; k];
    for pass in passes {
        for ((s, &p), &m) in class_std.iter_mut().zip(pass).zip(&class_mean) {
            *s += (p - m) * (p - m);
        }
    }
    for s in class_std.iter_mut() {
        *s = (*s / n as f64).sqrt();
    }
    let entropy = predictive_entropy(&class_mean)?;
    let predicted_class = argmax_slice(&class_mean);
    Ok(PredictiveSummary {
        class_mean,
        class_std,
        entropy,
        predicted_class,
        num_passes: n,
    })
}

fn check_ensemble<T: Element>(models: &[Model<T>], config: &EnsembleConfig) -> Result<()> {
    config.validate()?;
    if models.len() != config.num_models {
        return Err(Error::config(format!(
            "ensemble config expects {} models, got {}",
            config.num_models,
            models.len()
        )));
    }
    let first = models[0].spec();
    if models.iter().any(|m| m.spec() != first) {
        return Err(Error::config("ensemble models have inconsistent specs"));
    }
    Ok(())
}

/// Runs all `N` passes for one batch. Returns, per sample, the list of pass
/// outputs `[N][K]` in pass-index order.
fn collect_passes<T: Element>(
    models: &[Model<T>],
    batch: &Tensor<T>,
    config: &EnsembleConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let batch_size = batch.shape()[0];
    let mut per_sample: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(config.total_passes()); batch_size];
    for (model_idx, model) in models.iter().enumerate() {
        for t in 0..config.passes_per_model {
            let pass = model_idx * config.passes_per_model + t;
            let mut rng = config.pass_rng(pass);
            let probs = model.predict(batch, Mode::McInference, &mut rng)?;
            let k = probs.shape()[1];
            for (sample, row) in per_sample.iter_mut().zip(probs.data().chunks(k)) {
                sample.push(row.iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    Ok(per_sample)
}

/// EMCD prediction for a single `[C, H, W]` sample.
pub fn emcd_predict<T: Element>(
    models: &[Model<T>],
    x: &Tensor<T>,
    config: &EnsembleConfig,
) -> Result<PredictiveSummary> {
    Ok(emcd_predict_detailed(models, x, config)?.0)
}

/// As [`emcd_predict`], also returning the raw per-pass softmax outputs.
pub fn emcd_predict_detailed<T: Element>(
    models: &[Model<T>],
    x: &Tensor<T>,
    config: &EnsembleConfig,
) -> Result<(PredictiveSummary, Vec<Vec<f64>>)> {
    check_ensemble(models, config)?;
    let expected = models[0].spec().input_shape;
    if x.shape() != expected {
        return Err(Error::shape(format!(
            "sample shape {:?} does not match model input {expected:?}; resize it through the data pipeline first",
            x.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.reshape(&shape)?;
    let mut per_sample = collect_passes(models, &batch, config)?;
    let passes = per_sample.remove(0);
    Ok((summarize_passes(&passes)?, passes))
}

/// EMCD prediction over a sample list, batched internally at [`EVAL_BATCH`].
pub fn emcd_predict_set<T: Element>(
    models: &[Model<T>],
    samples: &[Tensor<T>],
    config: &EnsembleConfig,
) -> Result<Vec<PredictiveSummary>> {
    check_ensemble(models, config)?;
    if samples.is_empty() {
        return Err(Error::data("EMCD over an empty sample set"));
    }
    let expected = models[0].spec().input_shape;
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != expected {
            return Err(Error::shape(format!(
                "sample {i} has shape {:?}, expected {expected:?}; resize it through the data pipeline first",
                s.shape()
            )));
        }
    }
    let mut summaries = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut data = Vec::new();
        for s in chunk {
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&expected);
        let batch = Tensor::from_vec(shape, data)?;
        for passes in collect_passes(models, &batch, config)? {
            summaries.push(summarize_passes(&passes)?);
        }
    }
    Ok(summaries)
}

/// EMCD evaluation of a labeled dataset, producing the same report shape as
/// deterministic evaluation.
pub fn evaluate_emcd<T: Element>(
    models: &[Model<T>],
    dataset: &Dataset<T>,
    config: &EnsembleConfig,
) -> Result<(Evaluation, Vec<PredictiveSummary>)> {
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let summaries = emcd_predict_set(models, &dataset.samples, config)?;
    let predictions: Vec<usize> = summaries.iter().map(|s| s.predicted_class).collect();
    let probabilities: Vec<Vec<f64>> = summaries.iter().map(|s| s.class_mean.clone()).collect();
    let report = MetricsReport::new(
        &dataset.labels,
        &predictions,
        Some(&probabilities),
        dataset.num_classes(),
    )?;
    Ok((
        Evaluation {
            predictions,
            probabilities,
            report,
        },
        summaries,
    ))
}

/// Distribution summary of one sample set under EMCD.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodSetSummary {
    pub count: usize,
    /// Mean over samples of the predictive entropy (nats).
    pub mean_entropy: f64,
    /// Mean over samples of the largest per-class std.
    pub mean_max_std: f64,
    /// Per-class: mean over samples of `class_mean[k]`.
    pub class_mean: Vec<f64>,
    /// Per-class: mean over samples of `class_std[k]`.
    pub class_std: Vec<f64>,
    /// Per-sample predictive entropies.
    pub entropies: Vec<f64>,
    /// Per-sample max-over-classes stds.
    pub max_stds: Vec<f64>,
}

fn summarize_set(summaries: &[PredictiveSummary]) -> OodSetSummary {
    let n = summaries.len();
    let k = summaries[0].class_mean.len();
    let mut class_mean = vec![0.0; k];
    let mut class_std = vec![0.0; k];
    let mut entropies = Vec::with_capacity(n);
    let mut max_stds = Vec::with_capacity(n);
    for s in summaries {
        for (acc, &m) in class_mean.iter_mut().zip(&s.class_mean) {
            *acc += m / n as f64;
        }
        for (acc, &v) in class_std.iter_mut().zip(&s.class_std) {
            *acc += v / n as f64;
        }
        entropies.push(s.entropy);
        max_stds.push(s.class_std.iter().cloned().fold(0.0, f64::max));
    }
    OodSetSummary {
        count: n,
        mean_entropy: entropies.iter().sum::<f64>() / n as f64,
        mean_max_std: max_stds.iter().sum::<f64>() / n as f64,
        class_mean,
        class_std,
        entropies,
        max_stds,
    }
}

/// Side-by-side uncertainty comparison between in-distribution samples and
/// an out-of-distribution set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub model_kind: String,
    pub class_names: Vec<String>,
    pub num_passes: usize,
    pub in_distribution: OodSetSummary,
    pub out_of_distribution: OodSetSummary,
    /// True when every per-class std in both sets is exactly zero (all
    /// dropout rates zero): the spread carries no uncertainty signal.
    pub uncertainty_disabled: bool,
}

impl OodReport {
    /// Rows of per-class Mean/STD per set, plus entropy summaries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,set,statistic");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",mean_entropy,mean_max_std\n");
        for (set_name, set) in [
            ("in_distribution", &self.in_distribution),
            ("out_of_distribution", &self.out_of_distribution),
        ] {
            for (stat, values) in [("mean", &set.class_mean), ("std", &set.class_std)] {
                out.push_str(&format!("{},{set_name},{stat}", self.model_kind));
                for v in values {
                    out.push_str(&format!(",{v:.6}"));
                }
                out.push_str(&format!(",{:.6},{:.6}\n", set.mean_entropy, set.mean_max_std));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares EMCD uncertainty between an in-distribution sample set and an
/// out-of-distribution one.
pub fn ood_report<T: Element>(
    models: &[Model<T>],
    samples_in: &[Tensor<T>],
    samples_ood: &[Tensor<T>],
    config: &EnsembleConfig,
    class_names: &[String],
) -> Result<OodReport> {
    if samples_in.is_empty() {
        return Err(Error::data("in-distribution sample set is empty"));
    }
    if samples_ood.is_empty() {
        return Err(Error::data("out-of-distribution sample set is empty"));
    }
    let in_summaries = emcd_predict_set(models, samples_in, config)?;
    let ood_summaries = emcd_predict_set(models, samples_ood, config)?;
    let in_distribution = summarize_set(&in_summaries);
    let out_of_distribution = summarize_set(&ood_summaries);
    let uncertainty_disabled = in_summaries
        .iter()
        .chain(ood_summaries.iter())
        .all(|s| s.class_std.iter().all(|&v| v == 0.0));
    Ok(OodReport {
        model_kind: models[0].spec().kind.name().to_string(),
        class_names: class_names.to_vec(),
        num_passes: config.total_passes(),
        in_distribution,
        out_of_distribution,
        uncertainty_disabled,
    })
}
