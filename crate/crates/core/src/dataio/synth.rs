//! Synthetic field images: textured soil, multi-lobed crops, two-lobed
//! dicots and stemless grass strokes. Labels and stems are taken from the
//! drawing geometry itself, and each image keeps its own per-class pixel
//! tally as it is painted.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_dataset, Channels, DatasetMeta, Sample};
use crate::classes::{LabelMask, StemClass, CROP, DICOT, GRASS, SOIL};
use crate::error::{Error, Result};
use crate::metrics::GroundTruthStem;
use crate::tensor::Tensor;

pub type PixelCounts = [usize; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub channels: Channels,
    pub mm_per_pixel: f64,
    /// Inclusive plant count ranges per image.
    pub crops: [usize; 2],
    pub dicots: [usize; 2],
    pub grasses: [usize; 2],
    pub crop_lobes: [usize; 2],
    pub crop_lobe_length: [f64; 2],
    pub crop_lobe_width: [f64; 2],
    pub crop_hub_radius: f64,
    pub dicot_lobe_length: [f64; 2],
    pub dicot_lobe_width: [f64; 2],
    pub dicot_hub_radius: f64,
    pub grass_length: [f64; 2],
    pub grass_width: [f64; 2],
    /// Probability that a plant may overlap plants already placed.
    pub overlap_rate: f64,
    /// Minimum distance between any two stems, in pixels.
    pub min_stem_distance: f64,
    /// Stems keep at least this distance from the border.
    pub margin: f64,
    pub soil_noise: f64,
    pub plant_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 200,
            width: 96,
            height: 96,
            seed: 7,
            channels: Channels::RgbNir,
            mm_per_pixel: 1.0,
            crops: [1, 2],
            dicots: [1, 3],
            grasses: [0, 2],
            crop_lobes: [4, 6],
            crop_lobe_length: [12.0, 18.0],
            crop_lobe_width: [6.0, 8.0],
            crop_hub_radius: 3.0,
            dicot_lobe_length: [5.0, 8.0],
            dicot_lobe_width: [4.0, 5.0],
            dicot_hub_radius: 1.5,
            grass_length: [20.0, 40.0],
            grass_width: [2.5, 3.0],
            overlap_rate: 0.2,
            min_stem_distance: 14.0,
            margin: 8.0,
            soil_noise: 10.0,
            plant_noise: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return fail("synthetic images need a positive size".into());
        }
        if 2.0 * self.margin >= self.width.min(self.height) as f64 {
            return fail(format!("margin {} leaves no room in a {}x{} image", self.margin, self.width, self.height));
        }
        for (name, r) in [("crops", self.crops), ("dicots", self.dicots), ("grasses", self.grasses), ("crop_lobes", self.crop_lobes)] {
            if r[0] > r[1] {
                return fail(format!("{name} range {r:?} is empty"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) || !(self.mm_per_pixel > 0.0) {
            return fail("overlap_rate must lie in [0, 1] and mm_per_pixel be positive".into());
        }
        Ok(())
    }
}

/// A generated sample together with the painter's own class tally.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub sample: Sample,
    pub counts: PixelCounts,
}

// Base colors (R, G, B, NIR).
const SOIL_COLOR: [f64; 4] = [118.0, 88.0, 62.0, 70.0];
const CROP_COLOR: [f64; 4] = [46.0, 128.0, 44.0, 205.0];
const CROP_HUB: [f64; 4] = [150.0, 190.0, 90.0, 235.0];
const DICOT_COLOR: [f64; 4] = [130.0, 165.0, 40.0, 180.0];
const DICOT_HUB: [f64; 4] = [200.0, 205.0, 120.0, 215.0];
const GRASS_COLOR: [f64; 4] = [70.0, 150.0, 120.0, 160.0];

struct Canvas {
    w: usize,
    h: usize,
    rgbn: Vec<[f64; 4]>,
    labels: Vec<u8>,
    counts: PixelCounts,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, label: u8, color: [f64; 4], noise: f64, rng: &mut ChaCha8Rng) {
        let i = y * self.w + x;
        self.counts[self.labels[i] as usize] -= 1;
        self.counts[label as usize] += 1;
        self.labels[i] = label;
        let n = rng.gen_range(-noise..=noise);
        self.rgbn[i] = color.map(|c| c + n);
    }

    /// Paint every pixel whose center satisfies `inside`, within a box.
    #[allow(clippy::too_many_arguments)]
    fn fill(
        &mut self,
        bbox: [f64; 4],
        label: u8,
        color: [f64; 4],
        noise: f64,
        rng: &mut ChaCha8Rng,
        inside: impl Fn(f64, f64) -> bool,
    ) {
        let x0 = bbox[0].floor().max(0.0) as usize;
        let y0 = bbox[1].floor().max(0.0) as usize;
        let x1 = (bbox[2].ceil().max(0.0) as usize).min(self.w - 1);
        let y1 = (bbox[3].ceil().max(0.0) as usize).min(self.h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside(x as f64, y as f64) {
                    self.paint(x, y, label, color, noise, rng);
                }
            }
        }
    }

    /// Ellipse with one end at `(sx, sy)`, extending `length` along `angle`.
    #[allow(clippy::too_many_arguments)]
    fn lobe(
        &mut self,
        sx: f64,
        sy: f64,
        angle: f64,
        length: f64,
        width: f64,
        label: u8,
        color: [f64; 4],
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let (c, s) = (angle.cos(), angle.sin());
        let (a, b) = (length / 2.0, width / 2.0);
        let (cx, cy) = (sx + a * c, sy + a * s);
        let bbox = [cx - a, cy - a, cx + a, cy + a];
        self.fill(bbox, label, color, noise, rng, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn disk(&mut self, cx: f64, cy: f64, r: f64, label: u8, color: [f64; 4], noise: f64, rng: &mut ChaCha8Rng) {
        self.fill([cx - r, cy - r, cx + r, cy + r], label, color, noise, rng, |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        });
    }

    /// Thick line segment from `(x0, y0)` to `(x1, y1)`.
    #[allow(clippy::too_many_arguments)]
    fn stroke(
        &mut self,
        p0: (f64, f64),
        p1: (f64, f64),
        width: f64,
        label: u8,
        color: [f64; 4],
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let half = width / 2.0;
        let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
        let len2 = dx * dx + dy * dy;
        let bbox = [
            p0.0.min(p1.0) - half,
            p0.1.min(p1.1) - half,
            p0.0.max(p1.0) + half,
            p0.1.max(p1.1) + half,
        ];
        self.fill(bbox, label, color, noise, rng, |x, y| {
            let t = (((x - p0.0) * dx + (y - p0.1) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (p0.0 + t * dx, p0.1 + t * dy);
            (x - px).powi(2) + (y - py).powi(2) <= half * half
        });
    }
}

struct Plant {
    class: StemClass,
    x: f64,
    y: f64,
    reach: f64,
    lobes: Vec<(f64, f64, f64)>,
}

fn range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, placed: &[Plant], reach: f64) -> Option<(f64, f64)> {
    let may_overlap = rng.gen_bool(cfg.overlap_rate);
    for _ in 0..100 {
        let x = rng.gen_range(cfg.margin..(cfg.width as f64 - 1.0 - cfg.margin));
        let y = rng.gen_range(cfg.margin..(cfg.height as f64 - 1.0 - cfg.margin));
        let ok = placed.iter().all(|p| {
            let d = (p.x - x).hypot(p.y - y);
            d >= cfg.min_stem_distance && (may_overlap || d >= p.reach + reach)
        });
        if ok {
            return Some((x, y));
        }
    }
    None
}

fn generate_one(cfg: &SynthConfig, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let mut canvas = Canvas {
        w,
        h,
        rgbn: vec![SOIL_COLOR; w * h],
        labels: vec![SOIL; w * h],
        counts: [w * h, 0, 0, 0],
    };
    for px in canvas.rgbn.iter_mut() {
        let n = rng.gen_range(-cfg.soil_noise..=cfg.soil_noise);
        *px = SOIL_COLOR.map(|c| c + n);
    }
    let mut plants: Vec<Plant> = Vec::new();
    let n_crops = rng.gen_range(cfg.crops[0]..=cfg.crops[1]);
    let n_dicots = rng.gen_range(cfg.dicots[0]..=cfg.dicots[1]);
    for (class, n) in [(StemClass::Crop, n_crops), (StemClass::Dicot, n_dicots)] {
        for _ in 0..n {
            let (count, len, wid) = match class {
                StemClass::Crop => (
                    rng.gen_range(cfg.crop_lobes[0]..=cfg.crop_lobes[1]),
                    cfg.crop_lobe_length,
                    cfg.crop_lobe_width,
                ),
                StemClass::Dicot => (2, cfg.dicot_lobe_length, cfg.dicot_lobe_width),
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let lobes: Vec<(f64, f64, f64)> = (0..count)
                .map(|k| {
                    let jitter = rng.gen_range(-0.25..0.25);
                    let angle = phase + std::f64::consts::TAU * k as f64 / count as f64 + jitter;
                    (angle, range(&mut rng, len), range(&mut rng, wid))
                })
                .collect();
            let reach = lobes.iter().map(|l| l.1).fold(0.0, f64::max);
            if let Some((x, y)) = place(&mut rng, cfg, &plants, reach) {
                plants.push(Plant {
                    class,
                    x,
                    y,
                    reach,
                    lobes,
                });
            }
        }
    }

    let n_grass = rng.gen_range(cfg.grasses[0]..=cfg.grasses[1]);
    for _ in 0..n_grass {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let len = range(&mut rng, cfg.grass_length);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let width = range(&mut rng, cfg.grass_width);
        let p1 = (x0 + len * angle.cos(), y0 + len * angle.sin());
        canvas.stroke((x0, y0), p1, width, GRASS, GRASS_COLOR, cfg.plant_noise, &mut rng);
    }
    // Small plants under large ones: dicots first, then crops.
    for class in [StemClass::Dicot, StemClass::Crop] {
        for p in plants.iter().filter(|p| p.class == class) {
            let (label, color) = match class {
                StemClass::Crop => (CROP, CROP_COLOR),
                StemClass::Dicot => (DICOT, DICOT_COLOR),
            };
            for &(angle, len, wid) in &p.lobes {
                canvas.lobe(p.x, p.y, angle, len, wid, label, color, cfg.plant_noise, &mut rng);
            }
        }
    }
    // Hubs last so every stem sits on a pixel of its own class.
    for class in [StemClass::Dicot, StemClass::Crop] {
        for p in plants.iter().filter(|p| p.class == class) {
            let (label, color, r) = match class {
                StemClass::Crop => (CROP, CROP_HUB, cfg.crop_hub_radius),
                StemClass::Dicot => (DICOT, DICOT_HUB, cfg.dicot_hub_radius),
            };
            canvas.disk(p.x, p.y, r, label, color, cfg.plant_noise, &mut rng);
            let (px, py) = (p.x.round() as usize, p.y.round() as usize);
            canvas.paint(px, py, label, color, cfg.plant_noise, &mut rng);
        }
    }

    let c = cfg.channels.count();
    let plane = w * h;
    let mut data = vec![0.0; c * plane];
    for (i, px) in canvas.rgbn.iter().enumerate() {
        for ch in 0..c {
            data[ch * plane + i] = px[ch].round().clamp(0.0, 255.0);
        }
    }
    let stems = plants
        .iter()
        .map(|p| GroundTruthStem {
            class: p.class,
            x: (p.x * 1e6).round() / 1e6,
            y: (p.y * 1e6).round() / 1e6,
        })
        .collect();
    SynthImage {
        sample: Sample {
            id: format!("synth{index:05}"),
            image: Tensor::new([c, h, w], data).expect("consistent extents"),
            plant: LabelMask::new(w, h, canvas.labels).expect("consistent extents"),
            stems,
        },
        counts: canvas.counts,
    }
}

/// Generate in memory. Image `i` depends only on `(seed, i)`.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    Ok((0..cfg.images).map(|i| generate_one(cfg, i)).collect())
}

/// Generate and write a dataset under `root`.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<Vec<SynthImage>> {
    let images = synth_samples(cfg)?;
    let samples: Vec<Sample> = images.iter().map(|s| s.sample.clone()).collect();
    save_dataset(root, &DatasetMeta::new(cfg.mm_per_pixel, cfg.channels), &samples)?;
    Ok(images)
}
