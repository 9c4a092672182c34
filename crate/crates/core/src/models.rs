//! The model zoo: a plain CNN, a multi-headed CNN, and the two-branch
//! feature-fusion network, all built from one declarative [`ModelSpec`].
//!
//! The fusion network runs two branches over the same input. Branch 1 is a
//! stack of five double-conv blocks with MC dropout on blocks 4 and 5;
//! branch 2 is a smaller conv backbone trained jointly (it stands in for an
//! externally pretrained feature extractor, and checkpoints record which
//! branch produced the features). The fusion layer concatenates the pooled
//! outputs of blocks 3, 4, 5 and the backbone into one feature vector that
//! feeds a 512/128/64 dense head with MC dropout rates 0.7/0.5/0.3.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv_block, conv_pool_block, conv_pool_block_plain, dense, flatten, mc_dropout,
    update_running_stat, vgg_block, Activation, BatchNormNodes, ConvBlockSpec, ConvParamNodes,
    DenseParamNodes, Mode,
};
use crate::rng::Rng;
use crate::tensor::{Element, NodeId, Tape, Tensor};

/// Canonical fusion tap order; declared sources must respect it.
const FUSION_TAP_ORDER: [&str; 4] = ["conv3", "conv4", "conv5", "backbone"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SimpleCnn,
    MultiHeadedCnn,
    FuseNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SimpleCnn => "simple_cnn",
            ModelKind::MultiHeadedCnn => "multi_headed_cnn",
            ModelKind::FuseNet => "fusenet",
        }
    }
}

/// Declarative architecture description. Constructors fill in the standard
/// plans; everything is serialized into checkpoints verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]` of a single input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Fusenet branch-1 double blocks, or the plain CNN's conv layers.
    pub block_specs: Vec<ConvBlockSpec>,
    /// Multi-headed CNN: first-block kernel size per head.
    pub head_kernels: Vec<usize>,
    /// Multi-headed CNN: per-head channel plan (one entry per block).
    pub head_channels: Vec<usize>,
    /// Fusenet backbone branch: single-conv block channels.
    pub backbone_channels: Vec<usize>,
    /// Fusenet: fusion tap names in concatenation order.
    pub fusion_sources: Vec<String>,
    /// Dense head widths ending in `num_classes`.
    pub dense_widths: Vec<usize>,
    /// MC dropout rate after each hidden dense layer.
    pub head_dropout_rates: Vec<f64>,
    /// Plain CNN: MC dropout rate after the feature extractor.
    pub feature_dropout_rate: f64,
}

impl ModelSpec {
    /// Plain CNN: three conv-pool layers, MC dropout, three dense layers.
    pub fn simple_cnn(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SimpleCnn,
            input_shape,
            num_classes,
            block_specs: vec![
                ConvBlockSpec::new(16, 3),
                ConvBlockSpec::new(32, 3),
                ConvBlockSpec::new(64, 3),
            ],
            head_kernels: vec![],
            head_channels: vec![],
            backbone_channels: vec![],
            fusion_sources: vec![],
            dense_widths: vec![512, 128, 64, num_classes],
            head_dropout_rates: vec![0.7, 0.5, 0.3],
            feature_dropout_rate: 0.2,
        }
    }

    /// Multi-headed CNN: three parallel feature heads with distinct first
    /// kernels, fused by concatenation.
    pub fn multi_headed(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MultiHeadedCnn,
            input_shape,
            num_classes,
            block_specs: vec![],
            head_kernels: vec![3, 5, 7],
            head_channels: vec![16, 32],
            backbone_channels: vec![],
            fusion_sources: vec![],
            dense_widths: vec![512, 128, 64, num_classes],
            head_dropout_rates: vec![0.7, 0.5, 0.3],
            feature_dropout_rate: 0.0,
        }
    }

    /// Two-branch fusion network with taps on blocks 3-5 plus the backbone.
    pub fn fusenet(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::FuseNet,
            input_shape,
            num_classes,
            block_specs: vec![
                ConvBlockSpec::new(16, 3),
                ConvBlockSpec::new(32, 3),
                ConvBlockSpec::new(64, 3),
                ConvBlockSpec::new(128, 3).with_dropout(0.2),
                ConvBlockSpec::new(128, 3).with_dropout(0.2),
            ],
            head_kernels: vec![],
            head_channels: vec![],
            backbone_channels: vec![32, 64, 128],
            fusion_sources: FUSION_TAP_ORDER.iter().map(|s| s.to_string()).collect(),
            dense_widths: vec![512, 128, 64, num_classes],
            head_dropout_rates: vec![0.7, 0.5, 0.3],
            feature_dropout_rate: 0.0,
        }
    }

    pub fn with_seeded_kind(kind: ModelKind, input_shape: [usize; 3], num_classes: usize) -> Self {
        match kind {
            ModelKind::SimpleCnn => Self::simple_cnn(input_shape, num_classes),
            ModelKind::MultiHeadedCnn => Self::multi_headed(input_shape, num_classes),
            ModelKind::FuseNet => Self::fusenet(input_shape, num_classes),
        }
    }

    /// Replaces every dropout rate with zero, making all modes coincide.
    pub fn without_dropout(mut self) -> Self {
        for block in &mut self.block_specs {
            block.has_dropout = false;
            block.dropout_rate = 0.0;
        }
        for rate in &mut self.head_dropout_rates {
            *rate = 0.0;
        }
        self.feature_dropout_rate = 0.0;
        self
    }

    /// Downsampling depth of the deepest pooling chain.
    fn pool_depth(&self) -> usize {
        match self.kind {
            ModelKind::SimpleCnn => self.block_specs.len(),
            ModelKind::MultiHeadedCnn => self.head_channels.len(),
            ModelKind::FuseNet => self.block_specs.len().max(self.backbone_channels.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.dense_widths.last() != Some(&self.num_classes) {
            return Err(Error::config(format!(
                "dense widths {:?} must end in num_classes {}",
                self.dense_widths, self.num_classes
            )));
        }
        if self.head_dropout_rates.len() + 1 != self.dense_widths.len() {
            return Err(Error::config(format!(
                "{} dropout rates for {} dense layers",
                self.head_dropout_rates.len(),
                self.dense_widths.len()
            )));
        }
        if self
            .head_dropout_rates
            .iter()
            .chain(std::iter::once(&self.feature_dropout_rate))
            .any(|r| !(0.0..1.0).contains(r))
        {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        for block in &self.block_specs {
            block.validate()?;
        }
        match self.kind {
            ModelKind::SimpleCnn => {
                if self.block_specs.is_empty() {
                    return Err(Error::config("simple CNN needs at least one conv layer"));
                }
            }
            ModelKind::MultiHeadedCnn => {
                if self.head_kernels.is_empty() || self.head_channels.is_empty() {
                    return Err(Error::config("multi-headed CNN needs head kernels and channels"));
                }
                if self.head_kernels.iter().any(|k| k % 2 == 0) {
                    return Err(Error::config("head kernels must be odd"));
                }
            }
            ModelKind::FuseNet => {
                if self.block_specs.len() != 5 {
                    return Err(Error::config(format!(
                        "fusenet branch 1 needs exactly 5 blocks, got {}",
                        self.block_specs.len()
                    )));
                }
                if self.backbone_channels.is_empty() {
                    return Err(Error::config("fusenet needs a backbone channel plan"));
                }
                if self.fusion_sources.is_empty() {
                    return Err(Error::config("fusenet needs at least one fusion source"));
                }
                let mut last_rank = None;
                for name in &self.fusion_sources {
                    let rank = FUSION_TAP_ORDER
                        .iter()
                        .position(|t| t == name)
                        .ok_or_else(|| {
                            Error::config(format!(
                                "unknown fusion source {name:?}; expected one of {FUSION_TAP_ORDER:?}"
                            ))
                        })?;
                    if let Some(prev) = last_rank {
                        if rank <= prev {
                            return Err(Error::config(format!(
                                "fusion sources must follow the order {FUSION_TAP_ORDER:?}"
                            )));
                        }
                    }
                    last_rank = Some(rank);
                }
            }
        }
        let depth = self.pool_depth();
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        if h % (1 << depth) != 0 || w % (1 << depth) != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} not divisible by 2^{depth} pooling chain"
            )));
        }
        Ok(())
    }
}

/// One named tensor in a model: weights, biases, or batchnorm statistics.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for batchnorm running statistics, which the optimizer skips.
    pub trainable: bool,
}

/// Ordered, named parameter table. Iteration order is insertion order and
/// therefore identical across builds of the same spec.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    /// Replaces a value; the shape must match the existing entry.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name:?} has shape {:?}, not {:?}",
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over trainable entries.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Feature vector assembled by concatenating named sources.
#[derive(Debug, Clone)]
pub struct FusedFeatureVector {
    pub node: NodeId,
    /// `(source name, width)` in concatenation order.
    pub segments: Vec<(String, usize)>,
}

impl FusedFeatureVector {
    pub fn total_width(&self) -> usize {
        self.segments.iter().map(|(_, w)| w).sum()
    }

    /// Recovers one source's columns from the fused matrix, bit-exactly.
    pub fn slice_segment<T: Element>(&self, fused: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        let (_, width) = self
            .segments
            .get(index)
            .ok_or_else(|| Error::index(format!("segment {index} of {}", self.segments.len())))?;
        let offset: usize = self.segments[..index].iter().map(|(_, w)| w).sum();
        let total = self.total_width();
        let batch = fused.shape()[0];
        if fused.shape() != [batch, total] {
            return Err(Error::shape(format!(
                "fused tensor {:?} does not match segment table width {total}",
                fused.shape()
            )));
        }
        let mut data = Vec::with_capacity(batch * width);
        for b in 0..batch {
            data.extend_from_slice(&fused.data()[b * total + offset..b * total + offset + width]);
        }
        Tensor::from_vec(vec![batch, *width], data)
    }
}

/// Concatenates `[B, p_i]` sources along the feature axis in declared order.
pub fn fuse_features<T: Element>(
    tape: &mut Tape<T>,
    sources: &[(&str, NodeId)],
) -> Result<FusedFeatureVector> {
    if sources.is_empty() {
        return Err(Error::shape("fusion needs at least one source"));
    }
    let ids: Vec<NodeId> = sources.iter().map(|&(_, id)| id).collect();
    let node = tape.concat_features(&ids)?;
    let segments = sources
        .iter()
        .map(|&(name, id)| (name.to_string(), tape.value(id).shape()[1]))
        .collect();
    Ok(FusedFeatureVector { node, segments })
}

/// Pending batchnorm running-statistics update from a training pass.
pub struct BnUpdate<T: Element> {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Tensor<T>,
    pub batch_var: Tensor<T>,
}

/// Everything a forward pass produces besides raw output values.
pub struct ForwardPass<T: Element> {
    /// `[B, K]` softmax output node.
    pub probs: NodeId,
    /// `(parameter name, tape leaf)` for every trainable parameter, in
    /// parameter-store order. Empty outside training mode.
    pub param_nodes: Vec<(String, NodeId)>,
    /// Running-statistics updates to apply after the step (training only).
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Fusion segment table, for the architectures that have one.
    pub fused: Option<FusedFeatureVector>,
}

/// A built model: spec plus parameter table.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    spec: ModelSpec,
    params: ParamStore<T>,
}

pub fn build_simple_cnn<T: Element>(spec: &ModelSpec, init_seed: u64) -> Result<Model<T>> {
    if spec.kind != ModelKind::SimpleCnn {
        return Err(Error::config(format!("expected simple_cnn spec, got {:?}", spec.kind)));
    }
    Model::build(spec, init_seed)
}

pub fn build_multi_headed_cnn<T: Element>(spec: &ModelSpec, init_seed: u64) -> Result<Model<T>> {
    if spec.kind != ModelKind::MultiHeadedCnn {
        return Err(Error::config(format!(
            "expected multi_headed_cnn spec, got {:?}",
            spec.kind
        )));
    }
    Model::build(spec, init_seed)
}

pub fn build_fusenet<T: Element>(spec: &ModelSpec, init_seed: u64) -> Result<Model<T>> {
    if spec.kind != ModelKind::FuseNet {
        return Err(Error::config(format!("expected fusenet spec, got {:?}", spec.kind)));
    }
    Model::build(spec, init_seed)
}

impl<T: Element> Model<T> {
    /// Builds and He-initializes a model; deterministic per `init_seed`.
    pub fn build(spec: &ModelSpec, init_seed: u64) -> Result<Model<T>> {
        spec.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            seed: init_seed,
        };
        let in_ch = spec.input_shape[0];
        match spec.kind {
            ModelKind::SimpleCnn => {
                let mut ch = in_ch;
                for (i, block) in spec.block_specs.iter().enumerate() {
                    b.single_block(&format!("features.block{}", i + 1), ch, block, true)?;
                    ch = block.out_channels;
                }
                let spatial = (spec.input_shape[1] >> spec.block_specs.len())
                    * (spec.input_shape[2] >> spec.block_specs.len());
                b.classifier(ch * spatial, spec)?;
            }
            ModelKind::MultiHeadedCnn => {
                for (h, blocks) in head_plans(spec).iter().enumerate() {
                    let mut ch = in_ch;
                    for (j, block) in blocks.iter().enumerate() {
                        b.single_block(&format!("head{}.block{}", h + 1, j + 1), ch, block, true)?;
                        ch = block.out_channels;
                    }
                }
                let fused_width: usize = spec.head_kernels.len()
                    * spec.head_channels.last().copied().unwrap_or(0);
                b.classifier(fused_width, spec)?;
            }
            ModelKind::FuseNet => {
                let mut ch = in_ch;
                for (i, block) in spec.block_specs.iter().enumerate() {
                    b.double_block(&format!("branch1.block{}", i + 1), ch, block)?;
                    ch = block.out_channels;
                }
                let mut ch = in_ch;
                for (j, &out_ch) in spec.backbone_channels.iter().enumerate() {
                    let prefix = format!("backbone.block{}", j + 1);
                    b.conv(&format!("{prefix}.conv1"), ch, out_ch, 3)?;
                    b.conv(&format!("{prefix}.conv2"), out_ch, out_ch, 3)?;
                    ch = out_ch;
                }
                let fused_width: usize = spec
                    .fusion_sources
                    .iter()
                    .map(|name| fusion_tap_width(spec, name))
                    .sum();
                b.classifier(fused_width, spec)?;
            }
        }
        Ok(Model {
            spec: spec.clone(),
            params: b.store,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of trainable scalars; a pure function of the spec.
    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable_scalars()
    }

    /// Records the full forward pass for `batch` on `tape`.
    ///
    /// * `Train`: dropout active, batchnorm on batch statistics, parameter
    ///   leaves require gradients, running-stat updates are returned.
    /// * `McInference`: dropout active (the stochastic mask differs per call
    ///   through `rng`), batchnorm on running statistics, nothing mutates.
    /// * `Deterministic`: dropout inactive, batchnorm on running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardPass<T>> {
        let [c, h, w] = self.spec.input_shape;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "batch shape {shape:?} does not match input [B, {c}, {h}, {w}]"
            )));
        }
        let mut wiring = Wiring {
            tape,
            store: &self.params,
            mode,
            leaves: HashMap::new(),
            param_nodes: Vec::new(),
            bn_updates: Vec::new(),
        };
        let x = wiring.tape.leaf(batch.clone(), false);

        let (probs, fused) = match self.spec.kind {
            ModelKind::SimpleCnn => {
                let mut cur = x;
                for i in 0..self.spec.block_specs.len() {
                    cur = wiring.single_block(&format!("features.block{}", i + 1), cur, true)?;
                }
                cur = mc_dropout(
                    wiring.tape,
                    cur,
                    self.spec.feature_dropout_rate,
                    rng,
                    mode.dropout_active(),
                )?;
                let flat = flatten(wiring.tape, cur)?;
                let probs = wiring.classifier(flat, &self.spec, rng)?;
                (probs, None)
            }
            ModelKind::MultiHeadedCnn => {
                let plans = head_plans(&self.spec);
                let mut taps: Vec<(String, NodeId)> = Vec::new();
                for (hh, blocks) in plans.iter().enumerate() {
                    let mut cur = x;
                    for j in 0..blocks.len() {
                        cur =
                            wiring.single_block(&format!("head{}.block{}", hh + 1, j + 1), cur, true)?;
                    }
                    let pooled = wiring.tape.global_avg_pool(cur)?;
                    taps.push((format!("head{}", hh + 1), pooled));
                }
                let source_refs: Vec<(&str, NodeId)> =
                    taps.iter().map(|(n, id)| (n.as_str(), *id)).collect();
                let fused = fuse_features(wiring.tape, &source_refs)?;
                let probs = wiring.classifier(fused.node, &self.spec, rng)?;
                (probs, Some(fused))
            }
            ModelKind::FuseNet => {
                let mut cur = x;
                let mut taps: HashMap<String, NodeId> = HashMap::new();
                for (i, block) in self.spec.block_specs.iter().enumerate() {
                    cur = wiring.double_block(
                        &format!("branch1.block{}", i + 1),
                        block,
                        cur,
                        rng,
                    )?;
                    if i + 1 >= 3 {
                        let pooled = wiring.tape.global_avg_pool(cur)?;
                        taps.insert(format!("conv{}", i + 1), pooled);
                    }
                }
                let mut back = x;
                for j in 0..self.spec.backbone_channels.len() {
                    back = wiring.vgg_block(&format!("backbone.block{}", j + 1), back)?;
                }
                let pooled = wiring.tape.global_avg_pool(back)?;
                taps.insert("backbone".to_string(), pooled);

                let mut sources: Vec<(&str, NodeId)> = Vec::new();
                for name in &self.spec.fusion_sources {
                    let id = taps.get(name).ok_or_else(|| {
                        Error::config(format!("fusion source {name:?} not produced by this spec"))
                    })?;
                    sources.push((name.as_str(), *id));
                }
                let fused = fuse_features(wiring.tape, &sources)?;
                let probs = wiring.classifier(fused.node, &self.spec, rng)?;
                (probs, Some(fused))
            }
        };

        Ok(ForwardPass {
            probs,
            param_nodes: wiring.param_nodes,
            bn_updates: wiring.bn_updates,
            fused,
        })
    }

    /// Convenience single-shot forward returning the softmax output values.
    pub fn predict(&self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, mode, rng)?;
        Ok(tape.value(pass.probs).clone())
    }

    /// Folds the batch statistics of a training pass into the stored running
    /// statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for update in updates {
            let mean = update_running_stat(&self.params.get(&update.mean_name)?.value, &update.batch_mean);
            let var = update_running_stat(&self.params.get(&update.var_name)?.value, &update.batch_var);
            self.params.set(&update.mean_name, mean)?;
            self.params.set(&update.var_name, var)?;
        }
        Ok(())
    }
}

/// Per-head block plans for the multi-headed CNN: single-conv blocks where
/// the first uses the head's own kernel size and deeper ones use 3x3.
fn head_plans(spec: &ModelSpec) -> Vec<Vec<ConvBlockSpec>> {
    spec.head_kernels
        .iter()
        .map(|&k| {
            spec.head_channels
                .iter()
                .enumerate()
                .map(|(j, &ch)| ConvBlockSpec::new(ch, if j == 0 { k } else { 3 }))
                .collect()
        })
        .collect()
}

/// Post-pooling feature width contributed by one fusion tap.
fn fusion_tap_width(spec: &ModelSpec, name: &str) -> usize {
    match name {
        "conv3" => spec.block_specs[2].out_channels,
        "conv4" => spec.block_specs[3].out_channels,
        "conv5" => spec.block_specs[4].out_channels,
        "backbone" => *spec.backbone_channels.last().expect("validated non-empty"),
        _ => 0,
    }
}

/// Parameter construction with per-entry derived init streams.
struct Builder<T: Element> {
    store: ParamStore<T>,
    seed: u64,
}

impl<T: Element> Builder<T> {
    fn randn(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let mut stream = Rng::derive(self.seed, self.store.len() as u64);
        Tensor::randn_with(&mut stream, shape, std)
    }

    fn conv(&mut self, prefix: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<()> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = self.randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt())?;
        self.store.insert(&format!("{prefix}.weight"), w, true)?;
        self.store
            .insert(&format!("{prefix}.bias"), Tensor::zeros(&[out_ch])?, true)
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.store
            .insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())?, true)?;
        self.store
            .insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels])?, true)?;
        self.store.insert(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels])?,
            false,
        )?;
        self.store.insert(
            &format!("{prefix}.running_var"),
            Tensor::full(&[channels], T::one())?,
            false,
        )
    }

    fn double_block(&mut self, prefix: &str, in_ch: usize, spec: &ConvBlockSpec) -> Result<()> {
        self.conv(&format!("{prefix}.conv1"), in_ch, spec.out_channels, spec.kernel)?;
        self.conv(&format!("{prefix}.conv2"), spec.out_channels, spec.out_channels, spec.kernel)?;
        self.bn(&format!("{prefix}.bn"), spec.out_channels)
    }

    fn single_block(
        &mut self,
        prefix: &str,
        in_ch: usize,
        spec: &ConvBlockSpec,
        with_bn: bool,
    ) -> Result<()> {
        self.conv(&format!("{prefix}.conv"), in_ch, spec.out_channels, spec.kernel)?;
        if with_bn {
            self.bn(&format!("{prefix}.bn"), spec.out_channels)?;
        }
        Ok(())
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.randn(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())?;
        self.store.insert(&format!("{prefix}.weight"), w, true)?;
        self.store
            .insert(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out])?, true)
    }

    fn classifier(&mut self, mut width: usize, spec: &ModelSpec) -> Result<()> {
        for (i, &out) in spec.dense_widths.iter().enumerate() {
            self.dense(&format!("classifier.dense{}", i + 1), width, out)?;
            width = out;
        }
        Ok(())
    }
}

/// Forward-pass wiring: resolves store entries to tape leaves on demand.
struct Wiring<'t, 's, T: Element> {
    tape: &'t mut Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    leaves: HashMap<String, NodeId>,
    param_nodes: Vec<(String, NodeId)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Element> Wiring<'_, '_, T> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let entry = self.store.get(name)?;
        let requires_grad = entry.trainable && self.mode == Mode::Train;
        let id = self.tape.leaf(entry.value.clone(), requires_grad);
        self.leaves.insert(name.to_string(), id);
        if requires_grad {
            self.param_nodes.push((name.to_string(), id));
        }
        Ok(id)
    }

    fn conv_nodes(&mut self, prefix: &str) -> Result<ConvParamNodes> {
        Ok(ConvParamNodes {
            weight: self.param(&format!("{prefix}.weight"))?,
            bias: self.param(&format!("{prefix}.bias"))?,
        })
    }

    fn bn_nodes(&mut self, prefix: &str) -> Result<BatchNormNodes<T>> {
        Ok(BatchNormNodes {
            gamma: self.param(&format!("{prefix}.gamma"))?,
            beta: self.param(&format!("{prefix}.beta"))?,
            running_mean: self.store.get(&format!("{prefix}.running_mean"))?.value.clone(),
            running_var: self.store.get(&format!("{prefix}.running_var"))?.value.clone(),
        })
    }

    fn record_bn_stats(&mut self, prefix: &str, stats: Option<(Tensor<T>, Tensor<T>)>) {
        if let Some((mean, var)) = stats {
            self.bn_updates.push(BnUpdate {
                mean_name: format!("{prefix}.bn.running_mean"),
                var_name: format!("{prefix}.bn.running_var"),
                batch_mean: mean,
                batch_var: var,
            });
        }
    }

    fn double_block(
        &mut self,
        prefix: &str,
        spec: &ConvBlockSpec,
        x: NodeId,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let conv1 = self.conv_nodes(&format!("{prefix}.conv1"))?;
        let conv2 = self.conv_nodes(&format!("{prefix}.conv2"))?;
        let bn = self.bn_nodes(&format!("{prefix}.bn"))?;
        let out = conv_block(self.tape, x, spec, conv1, conv2, bn, self.mode, rng)?;
        self.record_bn_stats(prefix, out.batch_stats);
        Ok(out.out)
    }

    fn vgg_block(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let conv1 = self.conv_nodes(&format!("{prefix}.conv1"))?;
        let conv2 = self.conv_nodes(&format!("{prefix}.conv2"))?;
        vgg_block(self.tape, x, conv1, conv2)
    }

    fn single_block(&mut self, prefix: &str, x: NodeId, with_bn: bool) -> Result<NodeId> {
        let conv = self.conv_nodes(&format!("{prefix}.conv"))?;
        if with_bn {
            let bn = self.bn_nodes(&format!("{prefix}.bn"))?;
            let out = conv_pool_block(self.tape, x, conv, bn, self.mode)?;
            self.record_bn_stats(prefix, out.batch_stats);
            Ok(out.out)
        } else {
            conv_pool_block_plain(self.tape, x, conv)
        }
    }

    fn classifier(&mut self, mut x: NodeId, spec: &ModelSpec, rng: &mut Rng) -> Result<NodeId> {
        let n = spec.dense_widths.len();
        for i in 0..n {
            let params = DenseParamNodes {
                weight: self.param(&format!("classifier.dense{}.weight", i + 1))?,
                bias: self.param(&format!("classifier.dense{}.bias", i + 1))?,
            };
            if i + 1 < n {
                x = dense(self.tape, x, params, Activation::Relu)?;
                x = mc_dropout(
                    self.tape,
                    x,
                    spec.head_dropout_rates[i],
                    rng,
                    self.mode.dropout_active(),
                )?;
            } else {
                x = dense(self.tape, x, params, Activation::Softmax)?;
            }
        }
        Ok(x)
    }
}
