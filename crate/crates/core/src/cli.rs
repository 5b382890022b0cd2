//! Command-line entry points: `synth`, `train`, `infer` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamFile;
use crate::classes::{LabelMask, StemClass, PLANT_CLASSES};
use crate::dataio::{self, load_dataset, split_dataset, write_atomic, Sample, SplitSpec, SynthConfig};
use crate::metrics::{EvalReport, MatchConfig, PixelAccumulator, StemAccumulator};
use crate::netarch::NetworkConfig;
use crate::stemextract::{read_detections_csv, write_detections_csv, ProbabilityMask, StemDetection};
use crate::tensor::Tensor;
use crate::trainer::{predict, prepare_all, Prepared, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "stemseg", version, about = "Joint plant segmentation and stem detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with any of the sections [network], [train], [split], [synth].
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train the joint network on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the 2-level, N = 2, G = 2 topology.
        #[arg(long)]
        tiny: bool,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a checkpoint on a dataset and write predictions.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
    },
    /// Score saved predictions against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        #[arg(long)]
        theta_mm: Option<f64>,
    },
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    fn echo(&self, out: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        write_atomic(&out.join("config.toml"), text.as_bytes())?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            images,
            width,
            height,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            cfg.synth.images = images.unwrap_or(cfg.synth.images);
            cfg.synth.width = width.unwrap_or(cfg.synth.width);
            cfg.synth.height = height.unwrap_or(cfg.synth.height);
            cmd_synth(&cfg, &common.out)
        }
        Command::Train {
            common,
            data,
            epochs,
            tiny,
            resume,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if tiny {
                cfg.network = NetworkConfig {
                    blocks: NetworkConfig::tiny().blocks,
                    ..cfg.network
                };
            }
            cmd_train(&cfg, &data, &common.out, resume.as_deref())
        }
        Command::Infer {
            common,
            data,
            checkpoint,
            subset,
        } => {
            let cfg = PipelineConfig::load(common.config.as_deref())?;
            let expected = common.config.is_some().then(|| cfg.network.clone());
            cmd_infer(&cfg, expected.as_ref(), &data, &checkpoint, subset, &common.out)
        }
        Command::Eval {
            common,
            data,
            pred,
            subset,
            theta_mm,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            if let Some(t) = theta_mm {
                cfg.train.theta_mm = t;
            }
            cmd_eval(&cfg, &data, &pred, subset, &common.out).map(|report| print!("{}", report.to_table()))
        }
    }
}

pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let images = dataio::synth_generate(&cfg.synth, out)?;
    let mut totals = [0usize; 4];
    let mut stems = 0;
    for img in &images {
        for (t, c) in totals.iter_mut().zip(img.counts) {
            *t += c;
        }
        stems += img.sample.stems.len();
    }
    let audit = serde_json::json!({
        "images": images.len(),
        "stems": stems,
        "pixels": PLANT_CLASSES.iter().zip(totals).map(|(n, c)| (n.to_string(), c)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_atomic(&out.join("synth_audit.json"), serde_json::to_string_pretty(&audit)?.as_bytes())?;
    let echo = PipelineConfig {
        synth: cfg.synth.clone(),
        ..PipelineConfig::default()
    };
    echo.echo(out)?;
    println!("wrote {} images with {stems} stems to {}", images.len(), out.display());
    Ok(())
}

fn subset_samples(samples: Vec<Sample>, split: &SplitSpec, subset: Subset) -> anyhow::Result<Vec<Sample>> {
    if subset == Subset::All {
        return Ok(samples);
    }
    let parts = split_dataset(samples.len(), split)?;
    let ix = match subset {
        Subset::Train => parts.train,
        Subset::Val => parts.val,
        Subset::Test => parts.test,
        Subset::All => unreachable!(),
    };
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    Ok(ix.into_iter().map(|i| slots[i].take().expect("split indices are distinct")).collect())
}

pub fn cmd_train(cfg: &PipelineConfig, data: &Path, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let (meta, samples) = load_dataset(data)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(p)?;
            if t.net != cfg.network {
                bail!(
                    "checkpoint {} was written for {}, config requests {}",
                    p.display(),
                    t.net.summary(),
                    cfg.network.summary()
                );
            }
            t.cfg.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::new(cfg.network.clone(), cfg.train.clone())?,
    };
    let effective = PipelineConfig {
        network: trainer.net.clone(),
        train: trainer.cfg.clone(),
        split: cfg.split,
        synth: SynthConfig::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    effective.echo(out)?;
    let parts = split_dataset(samples.len(), &cfg.split)?;
    let pick = |ix: &[usize]| -> anyhow::Result<Vec<Prepared>> {
        let chosen: Vec<Sample> = ix.iter().map(|&i| samples[i].clone()).collect();
        Ok(prepare_all(&chosen, &trainer.cfg)?)
    };
    let train = pick(&parts.train)?;
    let val = pick(&parts.val)?;
    write_atomic(&out.join("split.json"), serde_json::to_string_pretty(&parts)?.as_bytes())?;
    println!(
        "training {} on {} images ({} val), {} parameters",
        trainer.net.summary(),
        train.len(),
        val.len(),
        trainer.params.num_parameters()
    );
    trainer.fit(&train, &val, meta.mm_per_pixel, Some(out), |row| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>4}  lr {:.0e}  loss {:.5}  val stem mAP {}  val seg mAP {}",
            row.epoch,
            row.lr,
            row.train_loss,
            fmt(row.val_stem_map),
            fmt(row.val_seg_map)
        );
    })?;
    Ok(())
}

pub const PROB_MAGIC: &[u8; 4] = b"PROB";

/// `PROB`, u32 K, H, W, then `K*H*W` little-endian f32 values.
pub fn encode_probs(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = PROB_MAGIC.to_vec();
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_probs(bytes: &[u8], path: &Path) -> crate::Result<Tensor<f32>> {
    let bad = |r: &str| crate::Error::Dataset {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != PROB_MAGIC {
        return Err(bad("not a probability dump"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n = shape.iter().product::<usize>();
    if bytes.len() != 16 + 4 * n {
        return Err(bad("length does not match the stored shape"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [0, 200, 0], [220, 0, 0], [0, 0, 220]];

pub fn colorize(mask: &LabelMask) -> Vec<u8> {
    mask.data().iter().flat_map(|&l| PALETTE[l as usize]).collect()
}

fn argmax_labels(probs: &Tensor<f32>) -> crate::Result<LabelMask> {
    let m = ProbabilityMask::from_tensor(probs)?;
    Ok(crate::stemextract::argmax_mask(&m))
}

/// Without `expected`, the network config stored in the checkpoint is used.
pub fn cmd_infer(
    cfg: &PipelineConfig,
    expected: Option<&NetworkConfig>,
    data: &Path,
    checkpoint: &Path,
    subset: Subset,
    out: &Path,
) -> anyhow::Result<()> {
    let file = ParamFile::<f32>::read(checkpoint)?;
    let net = expected.cloned().unwrap_or_else(|| file.config.clone());
    let params = file.into_params(&net)?;
    let cfg = &PipelineConfig {
        network: net,
        ..cfg.clone()
    };
    let (_, samples) = load_dataset(data)?;
    let samples = subset_samples(samples, &cfg.split, subset)?;
    let prepared = prepare_all(&samples, &cfg.train)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let preds = predict(&params, &cfg.network, &refs, cfg.train.batch_size, &cfg.train.extract)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(out)?;
    let mut rows = Vec::new();
    for p in &preds {
        write_atomic(&out.join("plant_probs").join(format!("{}.bin", p.id)), &encode_probs(&p.plant))?;
        let labels = argmax_labels(&p.plant)?;
        dataio::write_rgb_png(
            &out.join("plant_png").join(format!("{}.png", p.id)),
            labels.width(),
            labels.height(),
            &colorize(&labels),
        )?;
        rows.push((p.id.clone(), p.detections.clone()));
    }
    let mut csv = Vec::new();
    write_detections_csv(&mut csv, &rows)?;
    write_atomic(&out.join("stems.csv"), &csv)?;
    println!("wrote predictions for {} images to {}", preds.len(), out.display());
    Ok(())
}

/// Score the prediction directory written by `infer`. Plant probabilities
/// come from `plant_probs/<id>.bin`, or the hard labels of `plant_png/<id>.png`.
pub fn cmd_eval(cfg: &PipelineConfig, data: &Path, pred: &Path, subset: Subset, out: &Path) -> anyhow::Result<EvalReport> {
    let (meta, samples) = load_dataset(data)?;
    let samples = subset_samples(samples, &cfg.split, subset)?;
    let stems_path = pred.join("stems.csv");
    let file = fs::File::open(&stems_path).with_context(|| format!("opening {}", stems_path.display()))?;
    let mut by_id: std::collections::BTreeMap<String, Vec<StemDetection>> = Default::default();
    for (id, d) in read_detections_csv(file)? {
        by_id.entry(id).or_default().push(d);
    }
    let matching = MatchConfig {
        theta_mm: cfg.train.theta_mm,
        mm_per_pixel: meta.mm_per_pixel,
    };
    let mut stems = StemAccumulator::new();
    let mut pixels = PixelAccumulator::new(PLANT_CLASSES.len());
    let mut have_pixels = false;
    for s in &samples {
        let dets = by_id.remove(&s.id).unwrap_or_default();
        stems.add(&dets, &s.stems, &matching)?;
        let bin = pred.join("plant_probs").join(format!("{}.bin", s.id));
        let png = pred.join("plant_png").join(format!("{}.png", s.id));
        let probs = if bin.exists() {
            let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
            Some(ProbabilityMask::from_tensor(&decode_probs(&bytes, &bin)?)?)
        } else if png.exists() {
            Some(hard_probs(&png, s)?)
        } else {
            None
        };
        if let Some(p) = probs {
            pixels.add(&p, &s.plant)?;
            have_pixels = true;
        }
    }
    if let Some(id) = by_id.keys().next() {
        bail!("{} has detections for `{id}`, which is not in the evaluated subset", stems_path.display());
    }
    let report = EvalReport::build(&stems, have_pixels.then_some(&pixels))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
    for class in StemClass::ALL {
        if stems.num_gt(class) > 0 {
            let mut buf = Vec::new();
            stems.curve(class).write_csv(&mut buf)?;
            write_atomic(&out.join(format!("pr_stem_{class}.csv")), &buf)?;
        }
    }
    if have_pixels {
        for (c, name) in PLANT_CLASSES.iter().enumerate() {
            if let Ok(curve) = pixels.curve(c as u8) {
                let mut buf = Vec::new();
                curve.write_csv(&mut buf)?;
                write_atomic(&out.join(format!("pr_seg_{name}.csv")), &buf)?;
            }
        }
    }
    Ok(report)
}

/// One-hot probabilities from a color-mapped label image.
fn hard_probs(png: &Path, sample: &Sample) -> anyhow::Result<ProbabilityMask> {
    let rgb = dataio::read_image_png(png, dataio::Channels::Rgb)?;
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    if (w, h) != (sample.width(), sample.height()) {
        bail!("{} is {w}x{h}, the sample is {}x{}", png.display(), sample.width(), sample.height());
    }
    let plane = w * h;
    let d = rgb.data();
    let mut probs = vec![0.0; PLANT_CLASSES.len() * plane];
    for px in 0..plane {
        let color = [d[px] as u8, d[plane + px] as u8, d[2 * plane + px] as u8];
        let label = PALETTE
            .iter()
            .position(|c| *c == color)
            .with_context(|| format!("{}: color {color:?} is not in the palette", png.display()))?;
        probs[label * plane + px] = 1.0;
    }
    Ok(ProbabilityMask::new(PLANT_CLASSES.len(), w, h, probs)?)
}
