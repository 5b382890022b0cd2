//! Shared-encoder, dual-decoder FC-DenseNet.
//!
//! One encoder feeds two task decoders:
//!
//! ```text
//! image ─► [dense block ─► concat(input, block) ─► 1x1 compress ─► 5x5/2 down] x levels
//!                                   │ skip
//!          ┌────────────────────────┴────────────────────────┐
//!   plant decoder                                      stem decoder
//!   [2x2/2 up ─► concat(up, skip) ─► dense block] x levels (each)
//!   1x1 head ─► softmax (4 classes)                   1x1 head ─► softmax (3)
//! ```
//!
//! A "conv layer" is `conv ─► leaky ReLU ─► batch norm ─► dropout` unless
//! [`LayerOrder::ConvNormAct`] is selected. Parameter names are
//! hierarchical (`encoder.level0.block.layer1.conv.kernel`) and a pure
//! function of the [`NetworkConfig`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, BatchNormStats, Graph, NormMode, Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    /// Number of conv layers in the block (N).
    pub layers: usize,
    /// Feature maps added by each layer (G).
    pub growth_rate: usize,
    /// Output channels of 1x1 bottleneck and compression layers.
    pub bottleneck_width: usize,
}

impl DenseBlockConfig {
    pub fn new(layers: usize, growth_rate: usize) -> Self {
        DenseBlockConfig {
            layers,
            growth_rate,
            bottleneck_width: 4 * growth_rate,
        }
    }

    /// Channels emitted by the block (N * G).
    pub fn output_channels(&self) -> usize {
        self.layers * self.growth_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    #[default]
    ConvActNorm,
    ConvNormAct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Plant,
    Stem,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Plant, Task::Stem];

    pub fn prefix(self) -> &'static str {
        match self {
            Task::Plant => "plant",
            Task::Stem => "stem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    /// One dense block configuration per resolution level, shallowest first.
    /// Decoders mirror the encoder.
    pub blocks: Vec<DenseBlockConfig>,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    pub layer_order: LayerOrder,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub plant_classes: usize,
    pub stem_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 4,
            blocks: vec![DenseBlockConfig::new(4, 4); 4],
            dropout_p: 1.0 / 3.0,
            leaky_slope: 0.01,
            layer_order: LayerOrder::ConvActNorm,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            plant_classes: 4,
            stem_classes: 3,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale topology: 2 levels, N = 2, G = 2.
    pub fn tiny() -> Self {
        NetworkConfig {
            blocks: vec![DenseBlockConfig::new(2, 2); 2],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.blocks.is_empty() {
            return fail("at least one level is required".into());
        }
        if !(self.input_channels == 3 || self.input_channels == 4) {
            return fail(format!("input_channels must be 3 or 4, got {}", self.input_channels));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.growth_rate == 0 || b.bottleneck_width == 0 {
                return fail(format!("level {i}: N, G and bottleneck width must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if self.bn_epsilon <= 0.0 || !(0.0..1.0).contains(&self.bn_momentum) {
            return fail("batch norm epsilon must be positive and momentum in [0, 1)".into());
        }
        if self.plant_classes != 4 || self.stem_classes != 3 {
            return fail(format!(
                "class counts are fixed at 4 plant / 3 stem, got {} / {}",
                self.plant_classes, self.stem_classes
            ));
        }
        Ok(())
    }

    pub fn check_input_extent(&self, height: usize, width: usize) -> Result<()> {
        let m = self.required_multiple();
        for extent in [height, width] {
            if extent == 0 || extent % m != 0 {
                return Err(Error::Indivisible { extent, multiple: m });
            }
        }
        Ok(())
    }

    /// One-line description used in diagnostics.
    pub fn summary(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("N{}/G{}/W{}", b.layers, b.growth_rate, b.bottleneck_width))
            .collect();
        format!(
            "in={} levels=[{}] p={:.4} slope={} order={:?}",
            self.input_channels,
            blocks.join(","),
            self.dropout_p,
            self.leaky_slope,
            self.layer_order
        )
    }

    fn classes(&self, task: Task) -> usize {
        match task {
            Task::Plant => self.plant_classes,
            Task::Stem => self.stem_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel with its He fan-in.
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Every learnable tensor and batch-norm state of the joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, BatchNormStats<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect();
                    (
                        k.clone(),
                        BatchNormStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            updates: s.updates,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Fold training-batch moments into the running statistics.
    pub fn apply_moments(&mut self, moments: &[(String, BatchMoments<T>)], momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        for (name, batch) in moments {
            if let Some(stats) = self.running.get_mut(name) {
                stats.update(batch, m);
            }
        }
    }

    /// Check that the key set and shapes match what `cfg` requires.
    pub fn check_layout(&self, cfg: &NetworkConfig) -> Result<()> {
        let specs = param_layout(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::CorruptFile(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "parameter layout",
                        lhs: spec.shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::CorruptFile(format!("missing parameter `{}`", spec.name))),
            }
        }
        for (name, channels) in norm_layout(cfg) {
            match self.running.get(&name) {
                Some(s) if s.mean.len() == channels && s.var.len() == channels => {}
                _ => return Err(Error::CorruptFile(format!("missing running stats `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Walks the topology once, reporting conv layers, upsamplers and heads in
/// forward order. Shared by the parameter layout and the forward pass so
/// naming can never drift between them.
trait Visitor {
    fn conv_layer(&mut self, name: &str, in_c: usize, out_c: usize, k: usize);
    fn upsample(&mut self, name: &str, channels: usize);
    fn head(&mut self, name: &str, in_c: usize, classes: usize);
}

fn dense_block_channels(prefix: &str, in_c: usize, b: &DenseBlockConfig, v: &mut impl Visitor) -> usize {
    for i in 0..b.layers {
        let c = in_c + i * b.growth_rate;
        v.conv_layer(&format!("{prefix}.layer{i}.bottleneck"), c, b.bottleneck_width, 1);
        v.conv_layer(&format!("{prefix}.layer{i}.conv"), b.bottleneck_width, b.growth_rate, 3);
    }
    b.output_channels()
}

/// Returns the skip channel per level and the encoded channel count.
fn walk_encoder(cfg: &NetworkConfig, v: &mut impl Visitor) -> (Vec<usize>, usize) {
    let mut c = cfg.input_channels;
    let mut skips = Vec::new();
    for (l, b) in cfg.blocks.iter().enumerate() {
        let p = format!("encoder.level{l}");
        let grown = dense_block_channels(&format!("{p}.block"), c, b, v);
        v.conv_layer(&format!("{p}.compress"), c + grown, b.bottleneck_width, 1);
        v.conv_layer(&format!("{p}.down"), b.bottleneck_width, b.bottleneck_width, 5);
        skips.push(b.bottleneck_width);
        c = b.bottleneck_width;
    }
    (skips, c)
}

fn walk_decoder(cfg: &NetworkConfig, task: Task, skips: &[usize], encoded: usize, v: &mut impl Visitor) {
    let mut c = encoded;
    let mut last_input = 0;
    for l in (0..cfg.levels()).rev() {
        let p = format!("{}.level{l}", task.prefix());
        v.upsample(&format!("{p}.up"), c);
        last_input = c + skips[l];
        c = dense_block_channels(&format!("{p}.block"), last_input, &cfg.blocks[l], v);
    }
    v.head(&format!("{}.head", task.prefix()), last_input + c, cfg.classes(task));
}

struct LayoutCollector {
    specs: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl Visitor for LayoutCollector {
    fn conv_layer(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.kernel"),
            shape: vec![out_c, in_c, k, k],
            kind: ParamKind::Kernel { fan_in: in_c * k * k },
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out_c],
            kind: ParamKind::Bias,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![out_c],
            kind: ParamKind::Gamma,
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![out_c],
            kind: ParamKind::Beta,
        });
        self.norms.push((name.to_string(), out_c));
    }

    fn upsample(&mut self, name: &str, channels: usize) {
        // non-overlapping 2x2 windows: every output sees `channels` inputs
        self.specs.push(ParamSpec {
            name: format!("{name}.kernel"),
            shape: vec![channels, channels, 2, 2],
            kind: ParamKind::Kernel { fan_in: channels },
        });
    }

    fn head(&mut self, name: &str, in_c: usize, classes: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.kernel"),
            shape: vec![classes, in_c, 1, 1],
            kind: ParamKind::Kernel { fan_in: in_c },
        });
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![classes],
            kind: ParamKind::Bias,
        });
    }
}

fn collect(cfg: &NetworkConfig) -> LayoutCollector {
    let mut c = LayoutCollector {
        specs: Vec::new(),
        norms: Vec::new(),
    };
    let (skips, encoded) = walk_encoder(cfg, &mut c);
    for task in Task::ALL {
        walk_decoder(cfg, task, &skips, encoded, &mut c);
    }
    c
}

/// All learnable tensors, in forward order.
pub fn param_layout(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    collect(cfg).specs
}

/// Batch-norm layer names with their channel counts.
pub fn norm_layout(cfg: &NetworkConfig) -> Vec<(String, usize)> {
    collect(cfg).norms
}

/// Parameter count of the joint model and of two independent single-task
/// models with the same configuration.
pub fn parameter_counts(cfg: &NetworkConfig) -> (usize, usize) {
    let specs = param_layout(cfg);
    let count = |pred: &dyn Fn(&str) -> bool| -> usize {
        specs
            .iter()
            .filter(|s| pred(&s.name))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    };
    let encoder = count(&|n| n.starts_with("encoder."));
    let plant = count(&|n| n.starts_with("plant."));
    let stem = count(&|n| n.starts_with("stem."));
    (encoder + plant + stem, 2 * encoder + plant + stem)
}

/// He-normal kernels, zero biases, unit gammas, zero betas.
pub fn he_init<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = collect(cfg);
    let mut tensors = BTreeMap::new();
    for spec in layout.specs {
        let t = match spec.kind {
            ParamKind::Kernel { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(spec.shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
            }
            ParamKind::Bias | ParamKind::Beta => Tensor::zeros(spec.shape),
            ParamKind::Gamma => Tensor::full(spec.shape, T::one()),
        };
        tensors.insert(spec.name, t);
    }
    let running = layout
        .norms
        .into_iter()
        .map(|(name, c)| (name, BatchNormStats::new(c)))
        .collect();
    Ok(ModelParams { tensors, running })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// `[B, 4, H, W]` plant class probabilities.
    pub plant: Var,
    /// `[B, 3, H, W]` stem class probabilities.
    pub stem: Var,
}

/// One forward pass of the network recorded on a graph.
pub struct ForwardPass<'a, T: Scalar> {
    graph: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    cfg: &'a NetworkConfig,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    moments: Vec<(String, BatchMoments<T>)>,
}

impl<'a, T: Scalar> ForwardPass<'a, T> {
    /// Record all parameters on `graph` (as trainable leaves in training
    /// mode, constants otherwise). `dropout_seed` drives the dropout masks.
    pub fn new(
        graph: &'a mut Graph<T>,
        params: &'a ModelParams<T>,
        cfg: &'a NetworkConfig,
        mode: Mode,
        dropout_seed: u64,
    ) -> Self {
        Self::with_gradients(graph, params, cfg, mode, dropout_seed, mode == Mode::Train)
    }

    /// Like [`ForwardPass::new`] but with explicit control over whether the
    /// parameters require gradients.
    pub fn with_gradients(
        graph: &'a mut Graph<T>,
        params: &'a ModelParams<T>,
        cfg: &'a NetworkConfig,
        mode: Mode,
        dropout_seed: u64,
        trainable: bool,
    ) -> Self {
        let bound = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        ForwardPass {
            graph,
            params,
            cfg,
            bound,
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            moments: Vec::new(),
        }
    }

    pub fn graph(&mut self) -> &mut Graph<T> {
        self.graph
    }

    /// Graph handle of a named parameter.
    pub fn param(&self, name: &str) -> Result<Var> {
        self.bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("forward", format!("unknown parameter `{name}`")))
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Batch moments gathered in training mode, to be applied with
    /// [`ModelParams::apply_moments`].
    pub fn into_moments(self) -> Vec<(String, BatchMoments<T>)> {
        self.moments
    }

    fn conv_layer(&mut self, name: &str, input: Var, stride: usize) -> Result<Var> {
        let kernel = self.param(&format!("{name}.kernel"))?;
        let bias = self.param(&format!("{name}.bias"))?;
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let slope = T::from_f64_lossy(self.cfg.leaky_slope);
        let eps = T::from_f64_lossy(self.cfg.bn_epsilon);
        let y = self.graph.conv2d(input, kernel, Some(bias), stride, Padding::Same)?;
        let norm = |fp: &mut Self, x: Var| -> Result<Var> {
            let mode = match fp.mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => {
                    let stats = fp
                        .params
                        .running
                        .get(name)
                        .ok_or_else(|| Error::UninitializedRunningStats(name.to_string()))?;
                    if !stats.is_initialized() {
                        return Err(Error::UninitializedRunningStats(name.to_string()));
                    }
                    NormMode::Eval(stats)
                }
            };
            let (out, moments) = fp.graph.batch_norm(x, gamma, beta, mode, eps)?;
            if let Some(m) = moments {
                fp.moments.push((name.to_string(), m));
            }
            Ok(out)
        };
        let y = match self.cfg.layer_order {
            LayerOrder::ConvActNorm => {
                let a = self.graph.leaky_relu(y, slope);
                norm(self, a)?
            }
            LayerOrder::ConvNormAct => {
                let n = norm(self, y)?;
                self.graph.leaky_relu(n, slope)
            }
        };
        let train = self.mode == Mode::Train;
        self.graph.dropout(y, self.cfg.dropout_p, train, &mut self.rng)
    }

    /// Dense block: layer `i` reads the concatenation of the block input and
    /// all earlier layer outputs, runs a 1x1 bottleneck then a 3x3 conv
    /// layer. Returns the concatenation of the `N` layer outputs.
    pub fn dense_block(&mut self, prefix: &str, input: Var, block: &DenseBlockConfig) -> Result<Var> {
        let mut features = vec![input];
        let mut outputs = Vec::with_capacity(block.layers);
        for i in 0..block.layers {
            let x = self.graph.concat(&features)?;
            let b = self.conv_layer(&format!("{prefix}.layer{i}.bottleneck"), x, 1)?;
            let y = self.conv_layer(&format!("{prefix}.layer{i}.conv"), b, 1)?;
            features.push(y);
            outputs.push(y);
        }
        self.graph.concat(&outputs)
    }

    /// Returns `(skip, down)` for encoder level `level`.
    pub fn encoder_stage(&mut self, level: usize, input: Var) -> Result<(Var, Var)> {
        let block = self.block(level)?;
        let [_, _, h, w] = self.graph.value(input).dims4("encoder_stage")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Indivisible {
                extent: if h % 2 != 0 { h } else { w },
                multiple: 2,
            });
        }
        let p = format!("encoder.level{level}");
        let grown = self.dense_block(&format!("{p}.block"), input, &block)?;
        let joined = self.graph.concat(&[input, grown])?;
        let skip = self.conv_layer(&format!("{p}.compress"), joined, 1)?;
        let down = self.conv_layer(&format!("{p}.down"), skip, 2)?;
        Ok((skip, down))
    }

    /// Upsample, concatenate the matching encoder skip and run the level's
    /// dense block. Returns `(block input, block output)`.
    pub fn decoder_stage(&mut self, task: Task, level: usize, input: Var, skip: Var) -> Result<(Var, Var)> {
        let block = self.block(level)?;
        let p = format!("{}.level{level}", task.prefix());
        let kernel = self.param(&format!("{p}.up.kernel"))?;
        let up = self.graph.transpose_conv2d(input, kernel, 2)?;
        let us = self.graph.value(up).shape().to_vec();
        let ss = self.graph.value(skip).shape().to_vec();
        if us[2..] != ss[2..] {
            return Err(Error::ShapeMismatch {
                op: "decoder_stage",
                lhs: us,
                rhs: ss,
            });
        }
        let joined = self.graph.concat(&[up, skip])?;
        let out = self.dense_block(&format!("{p}.block"), joined, &block)?;
        Ok((joined, out))
    }

    fn head(&mut self, task: Task, input: Var) -> Result<Var> {
        let p = task.prefix();
        let kernel = self.param(&format!("{p}.head.kernel"))?;
        let bias = self.param(&format!("{p}.head.bias"))?;
        let logits = self.graph.conv2d(input, kernel, Some(bias), 1, Padding::Same)?;
        self.graph.softmax(logits)
    }

    fn block(&self, level: usize) -> Result<DenseBlockConfig> {
        self.cfg
            .blocks
            .get(level)
            .copied()
            .ok_or_else(|| Error::invalid("forward", format!("no level {level}")))
    }

    /// Full network on a preprocessed `[B, C, H, W]` batch.
    pub fn forward(&mut self, image: Var) -> Result<Heads> {
        let [_, c, h, w] = self.graph.value(image).dims4("forward")?;
        if c != self.cfg.input_channels {
            return Err(Error::invalid(
                "forward",
                format!("expected {} input channels, got {c}", self.cfg.input_channels),
            ));
        }
        self.cfg.check_input_extent(h, w)?;
        let mut skips = Vec::with_capacity(self.cfg.levels());
        let mut x = image;
        for level in 0..self.cfg.levels() {
            let (skip, down) = self.encoder_stage(level, x)?;
            skips.push(skip);
            x = down;
        }
        let encoded = x;
        let mut heads = [encoded; 2];
        for (slot, task) in heads.iter_mut().zip(Task::ALL) {
            let mut y = encoded;
            let mut last = (encoded, encoded);
            for level in (0..self.cfg.levels()).rev() {
                last = self.decoder_stage(task, level, y, skips[level])?;
                y = last.1;
            }
            let features = self.graph.concat(&[last.0, last.1])?;
            *slot = self.head(task, features)?;
        }
        Ok(Heads {
            plant: heads[0],
            stem: heads[1],
        })
    }
}

/// Eval-mode inference on a preprocessed batch; returns
/// `(plant_probs, stem_probs)`.
pub fn infer<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &NetworkConfig,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut graph = Graph::new();
    let mut fp = ForwardPass::new(&mut graph, params, cfg, Mode::Eval, 0);
    let x = fp.graph().constant(batch.clone());
    let heads = fp.forward(x)?;
    Ok((graph.value(heads.plant).clone(), graph.value(heads.stem).clone()))
}
