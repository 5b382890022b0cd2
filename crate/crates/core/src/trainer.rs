//! Optimization loop: Adam, step-decay learning rate, mini-batches in a
//! seeded per-epoch order, validation and checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::ParamFile;
use crate::classes::LabelMask;
use crate::dataio::{render_stem_regions, Sample, DEFAULT_STEM_RADIUS};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{EvalReport, GroundTruthStem, MatchConfig, PixelAccumulator, StemAccumulator};
use crate::netarch::{he_init, infer, ForwardPass, ModelParams, Mode, NetworkConfig};
use crate::preprocess::{preprocess_image, PreprocessConfig};
use crate::stemextract::{extract_stems, ExtractConfig, ProbabilityMask, StemDetection};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-indexed) from which the rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub stem_radius: f64,
    pub loss: LossConfig,
    pub preprocess: PreprocessConfig,
    pub extract: ExtractConfig,
    pub theta_mm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 0.01,
            lr_decay_epochs: vec![50, 250, 1000],
            lr_decay_factor: 10.0,
            epochs: 2000,
            alpha: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            eval_every: 1,
            stem_radius: DEFAULT_STEM_RADIUS,
            loss: LossConfig::default(),
            preprocess: PreprocessConfig::default(),
            extract: ExtractConfig::default(),
            theta_mm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay_factor > 0.0) {
            return fail("learning rate and decay factor must be positive".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("decay epochs {:?} must be strictly increasing", self.lr_decay_epochs));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        self.loss.validate()?;
        self.preprocess.validate()?;
        Ok(())
    }
}

/// Piecewise-constant schedule, each decay epoch dividing the rate once.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.learning_rate / cfg.lr_decay_factor.powi(decays as i32)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// Bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .tensors
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    // lr * sqrt(c2) / c1 folds both bias corrections into one factor.
    let step_size = (lr * c2.sqrt() / c1) as f32;
    let eps = (cfg.adam_epsilon * c2.sqrt()) as f32;
    for (name, g) in grads {
        let p = params.tensors.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        if m.len() != g.numel() || v.len() != g.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![m.len()],
                rhs: vec![g.numel()],
            });
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= step_size * *mi / (vi.sqrt() + eps);
        }
    }
    Ok(())
}

/// A sample with its network input and both label masks precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// Preprocessed `[C, H, W]` input.
    pub input: Tensor<f32>,
    pub plant: LabelMask,
    pub stem: LabelMask,
    pub stems: Vec<GroundTruthStem>,
}

pub fn prepare(sample: &Sample, cfg: &TrainConfig) -> Result<Prepared> {
    Ok(Prepared {
        id: sample.id.clone(),
        input: preprocess_image(&sample.image, &cfg.preprocess)?.cast(),
        plant: sample.plant.clone(),
        stem: render_stem_regions(&sample.stems, sample.width(), sample.height(), cfg.stem_radius)?,
        stems: sample.stems.clone(),
    })
}

pub fn prepare_all(samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, cfg)).collect()
}

fn stack_inputs(items: &[&Prepared]) -> Result<Tensor<f32>> {
    Tensor::stack(&items.iter().map(|p| p.input.clone()).collect::<Vec<_>>())
}

/// Per-image network outputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    /// `[4, H, W]` plant class probabilities.
    pub plant: Tensor<f32>,
    /// `[3, H, W]` stem class probabilities.
    pub stem: Tensor<f32>,
    pub detections: Vec<StemDetection>,
}

/// Eval-mode inference in mini-batches.
pub fn predict(
    params: &ModelParams<f32>,
    net: &NetworkConfig,
    items: &[&Prepared],
    batch_size: usize,
    extract: &ExtractConfig,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let (plant, stem) = infer(params, net, &stack_inputs(chunk)?)?;
        for (i, item) in chunk.iter().enumerate() {
            let plant_i = plant.batch_item(i)?;
            let stem_i = stem.batch_item(i)?;
            let detections = extract_stems(&ProbabilityMask::from_tensor(&stem_i)?, extract)?;
            out.push(Prediction {
                id: item.id.clone(),
                plant: plant_i,
                stem: stem_i,
                detections,
            });
        }
    }
    Ok(out)
}

/// Stem and pixel metrics of predictions against their samples.
pub fn evaluate_predictions(preds: &[Prediction], items: &[&Prepared], matching: &MatchConfig) -> Result<EvalReport> {
    let mut stems = StemAccumulator::new();
    let mut pixels: Option<PixelAccumulator> = None;
    for (p, item) in preds.iter().zip(items) {
        stems.add(&p.detections, &item.stems, matching)?;
        let probs = ProbabilityMask::from_tensor(&p.plant)?;
        pixels
            .get_or_insert_with(|| PixelAccumulator::new(probs.classes()))
            .add(&probs, &item.plant)?;
    }
    EvalReport::build(&stems, pixels.as_ref())
}

/// Mean of stem mAP and segmentation mAP, missing values counting as zero.
pub fn validation_score(report: &EvalReport) -> f64 {
    (report.stem_map.unwrap_or(0.0) + report.seg_map.unwrap_or(0.0)) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_stem_map: Option<f64>,
    pub val_seg_map: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_stem_mAP,val_seg_mAP";

pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:.8},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.val_stem_map),
            opt(r.val_seg_map)
        ));
    }
    s
}

/// Split-seed mixing so per-step and per-epoch streams never collide.
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order in which epoch `epoch` visits the training samples.
pub fn epoch_order(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    order
}

/// Loss value and gradients of one mini-batch.
pub struct StepResult {
    pub loss: f64,
    pub plant_loss: f64,
    pub stem_loss: f64,
    pub grads: BTreeMap<String, Tensor<f32>>,
}

/// Forward and backward pass on `items`; folds the batch moments into the
/// running statistics of `params`.
pub fn compute_step(
    params: &mut ModelParams<f32>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    items: &[&Prepared],
    dropout_seed: u64,
) -> Result<StepResult> {
    let input = stack_inputs(items)?;
    let plant_t: Vec<u8> = items.iter().flat_map(|p| p.plant.data().iter().copied()).collect();
    let stem_t: Vec<u8> = items.iter().flat_map(|p| p.stem.data().iter().copied()).collect();
    let mut graph = Graph::new();
    let mut fp = ForwardPass::new(&mut graph, params, net, Mode::Train, dropout_seed);
    let x = fp.graph().constant(input);
    let heads = fp.forward(x)?;
    let bound = fp.bound_params().clone();
    let moments = fp.into_moments();
    let plant = graph.weighted_cross_entropy(heads.plant, &plant_t, &cfg.loss.plant_class_weights)?;
    let stem = graph.soft_iou_loss(heads.stem, &stem_t, &cfg.loss.stem_foreground)?;
    let total = graph.multi_task_loss(stem, plant, cfg.alpha)?;
    graph.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound {
        if let Some(g) = graph.take_grad(var) {
            grads.insert(name, g);
        }
    }
    let result = StepResult {
        loss: graph.value(total).item() as f64,
        plant_loss: graph.value(plant).item() as f64,
        stem_loss: graph.value(stem).item() as f64,
        grads,
    };
    params.apply_moments(&moments, net.bn_momentum);
    Ok(result)
}

/// Training state that can be checkpointed and resumed exactly.
pub struct Trainer {
    pub net: NetworkConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(net: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        let params = he_init(&net, cfg.seed)?;
        Ok(Trainer {
            net,
            cfg,
            params,
            optimizer: OptimizerState::default(),
            epoch: 0,
            best_score: None,
            log: Vec::new(),
        })
    }

    fn check_data(&self, train: &[Prepared]) -> Result<()> {
        let Some(first) = train.first() else {
            return Err(Error::invalid("train", "the training split is empty"));
        };
        let c = first.input.shape()[0];
        if c != self.net.input_channels {
            return Err(Error::invalid(
                "train",
                format!("images have {c} channels, network expects {}", self.net.input_channels),
            ));
        }
        for p in train {
            self.net.check_input_extent(p.plant.height(), p.plant.width())?;
        }
        Ok(())
    }

    /// One pass over `train`; returns the mean step loss.
    pub fn run_epoch(&mut self, train: &[Prepared]) -> Result<f64> {
        self.check_data(train)?;
        let lr = lr_at(self.epoch, &self.cfg);
        let order = epoch_order(train.len(), self.cfg.seed, self.epoch);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let step_index = self.optimizer.step;
            let seed = mix(self.cfg.seed, 2, step_index);
            let r = compute_step(&mut self.params, &self.net, &self.cfg, &items, seed)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    step: step_index as usize,
                    loss: r.loss,
                });
            }
            adam_step(&mut self.params, &r.grads, &mut self.optimizer, lr, &self.cfg)?;
            total += r.loss;
            steps += 1;
        }
        Ok(total / steps as f64)
    }

    pub fn evaluate(&self, items: &[Prepared], mm_per_pixel: f64) -> Result<EvalReport> {
        let refs: Vec<&Prepared> = items.iter().collect();
        let preds = predict(&self.params, &self.net, &refs, self.cfg.batch_size, &self.cfg.extract)?;
        evaluate_predictions(
            &preds,
            &refs,
            &MatchConfig {
                theta_mm: self.cfg.theta_mm,
                mm_per_pixel,
            },
        )
    }

    /// Run epochs up to `cfg.epochs`, validating at the configured cadence
    /// and writing `best.ckpt`, `last.ckpt` and `train_log.csv` to `out`.
    pub fn fit(
        &mut self,
        train: &[Prepared],
        val: &[Prepared],
        mm_per_pixel: f64,
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        self.check_data(train)?;
        while self.epoch < self.cfg.epochs {
            let lr = lr_at(self.epoch, &self.cfg);
            let train_loss = self.run_epoch(train)?;
            let last = self.epoch + 1 == self.cfg.epochs;
            let report = if !val.is_empty() && ((self.epoch + 1).is_multiple_of(self.cfg.eval_every) || last) {
                Some(self.evaluate(val, mm_per_pixel)?)
            } else {
                None
            };
            let row = EpochLog {
                epoch: self.epoch,
                lr,
                train_loss,
                val_stem_map: report.as_ref().and_then(|r| r.stem_map),
                val_seg_map: report.as_ref().and_then(|r| r.seg_map),
            };
            on_epoch(&row);
            self.log.push(row);
            self.epoch += 1;
            let improved = match (&report, self.best_score) {
                (Some(r), best) => {
                    let s = validation_score(r);
                    let better = best.is_none_or(|b| s > b);
                    if better {
                        self.best_score = Some(s);
                    }
                    better
                }
                (None, _) => false,
            };
            if let Some(dir) = out {
                if improved || (val.is_empty() && last) {
                    self.save_best(&dir.join("best.ckpt"))?;
                }
                self.save_last(&dir.join("last.ckpt"))?;
                crate::dataio::write_atomic(&dir.join("train_log.csv"), log_to_csv(&self.log).as_bytes())?;
            }
        }
        Ok(())
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "epoch": self.epoch,
            "step": self.optimizer.step,
            "best_score": self.best_score,
            "train_config": self.cfg,
            "log": self.log,
        })
    }

    pub fn save_best(&self, path: &Path) -> Result<()> {
        ParamFile {
            config: self.net.clone(),
            metadata: serde_json::json!({
                "epoch": self.epoch,
                "val_score": self.best_score,
                "train_config": self.cfg,
            }),
            tensors: self.params.tensors.clone(),
            running: self.params.running.clone(),
        }
        .write(path)
    }

    /// Parameters plus optimizer moments (as `adam.m.*` / `adam.v.*`
    /// tensors) and the loop position.
    pub fn save_last(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.tensors.clone();
        for (prefix, moments) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for (name, data) in moments {
                let shape = self.params.tensors[name].shape().to_vec();
                tensors.insert(format!("{prefix}{name}"), Tensor::new(shape, data.clone())?);
            }
        }
        ParamFile {
            config: self.net.clone(),
            metadata: self.metadata(),
            tensors,
            running: self.params.running.clone(),
        }
        .write(path)
    }

    /// Restore a trainer from a `last.ckpt` written by [`Trainer::save_last`].
    pub fn resume(path: &Path) -> Result<Self> {
        let file = ParamFile::<f32>::read(path)?;
        let corrupt = |what: &str| Error::CorruptFile(format!("{}: {what}", path.display()));
        let meta = file.metadata.clone();
        let cfg: TrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|_| corrupt("missing training config"))?;
        let log: Vec<EpochLog> =
            serde_json::from_value(meta["log"].clone()).map_err(|_| corrupt("missing epoch log"))?;
        let epoch = meta["epoch"].as_u64().ok_or_else(|| corrupt("missing epoch"))? as usize;
        let step = meta["step"].as_u64().ok_or_else(|| corrupt("missing step"))?;
        let best_score = meta["best_score"].as_f64();
        let mut optimizer = OptimizerState {
            step,
            ..Default::default()
        };
        for (name, t) in &file.tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                optimizer.m.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                optimizer.v.insert(n.to_string(), t.data().to_vec());
            }
        }
        let net = file.config.clone();
        let params = file.into_params(&net)?;
        Ok(Trainer {
            net,
            cfg,
            params,
            optimizer,
            epoch,
            best_score,
            log,
        })
    }
}

/// Paths of the checkpoints written by [`Trainer::fit`].
pub fn checkpoint_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("best.ckpt"), out.join("last.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(49, &cfg), 0.01);
        assert!((lr_at(50, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_at(1500, &cfg) - 1e-5).abs() < 1e-18);
    }

    fn one_param(v: f32) -> ModelParams<f32> {
        ModelParams {
            tensors: [("w".to_string(), Tensor::full([3], v))].into_iter().collect(),
            running: BTreeMap::new(),
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = one_param(1.5);
        let mut s = OptimizerState::default();
        let g = [("w".to_string(), Tensor::zeros([3]))].into_iter().collect();
        adam_step(&mut p, &g, &mut s, 0.01, &TrainConfig::default()).unwrap();
        assert_eq!(p, one_param(1.5));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_param(0.0);
        let mut s = OptimizerState::default();
        let g = [("w".to_string(), Tensor::full([3], -2.5f32))].into_iter().collect();
        adam_step(&mut p, &g, &mut s, 0.01, &TrainConfig::default()).unwrap();
        for &w in p.tensors["w"].data() {
            assert!((w - 0.01).abs() < 1e-6, "{w}");
        }
        let bad = [("w".to_string(), Tensor::zeros([2]))].into_iter().collect();
        assert!(adam_step(&mut p, &bad, &mut s, 0.01, &TrainConfig::default()).is_err());
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let mut t = Trainer::new(NetworkConfig::tiny(), TrainConfig::default()).unwrap();
        assert!(t.run_epoch(&[]).is_err());
    }
}
