//! Dataset layout on disk, stem-region rendering, splits and resizing.
//!
//! ```text
//! <root>/meta.json          {"mm_per_pixel", "channels", "class_names"}
//! <root>/images/<id>.png    RGB, or RGBA with NIR in the fourth channel
//! <root>/labels/<id>.png    8-bit gray, 0 soil 1 crop 2 dicot 3 grass
//! <root>/stems/<id>.csv     id,class,x_px,y_px
//! ```

mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{LabelMask, StemClass, PLANT_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::GroundTruthStem;
use crate::tensor::Tensor;

pub use synth::{synth_generate, synth_samples, PixelCounts, SynthConfig, SynthImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Rgb,
    RgbNir,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::RgbNir => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub mm_per_pixel: f64,
    pub channels: Channels,
    pub class_names: Vec<String>,
}

impl DatasetMeta {
    pub fn new(mm_per_pixel: f64, channels: Channels) -> Self {
        DatasetMeta {
            mm_per_pixel,
            channels,
            class_names: PLANT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]` intensities on the 0..=255 scale.
    pub image: Tensor<f64>,
    pub plant: LabelMask,
    pub stems: Vec<GroundTruthStem>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.plant.width()
    }

    pub fn height(&self) -> usize {
        self.plant.height()
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Write via a temporary sibling file and rename, so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn encode_png(width: usize, height: usize, color: image::ExtendedColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        data,
        width as u32,
        height as u32,
        color,
    )
    .map_err(|source| Error::Image {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(out)
}

/// Interleave a `[C, H, W]` tensor into 8-bit pixels, rounding and clamping.
pub fn image_to_bytes(image: &Tensor<f64>) -> Vec<u8> {
    let (c, plane) = (image.shape()[0], image.shape()[1] * image.shape()[2]);
    let d = image.data();
    let mut out = vec![0u8; c * plane];
    for px in 0..plane {
        for ch in 0..c {
            out[px * c + ch] = d[ch * plane + px].round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn write_image_png(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        _ => return Err(Error::invalid("write_image_png", format!("{c} channels"))),
    };
    write_atomic(path, &encode_png(w, h, color, &image_to_bytes(image))?)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_atomic(path, &encode_png(width, height, image::ExtendedColorType::Rgb8, rgb)?)
}

pub fn write_label_png(path: &Path, mask: &LabelMask) -> Result<()> {
    write_atomic(
        path,
        &encode_png(mask.width(), mask.height(), image::ExtendedColorType::L8, mask.data())?,
    )
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_image_png(path: &Path, channels: Channels) -> Result<Tensor<f64>> {
    let img = open_png(path)?;
    let found = img.color().channel_count() as usize;
    if found != channels.count() || img.color().bytes_per_pixel() != found as u8 {
        return Err(Error::dataset(
            path,
            format!("expected {} 8-bit channels, found {:?}", channels.count(), img.color()),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = img.into_bytes();
    let c = found;
    let plane = w * h;
    Tensor::new(
        [c, h, w],
        (0..c * plane).map(|i| bytes[(i % plane) * c + i / plane] as f64).collect(),
    )
}

pub fn read_label_png(path: &Path) -> Result<LabelMask> {
    let img = open_png(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::dataset(path, format!("expected 8-bit gray labels, found {:?}", img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = LabelMask::new(w, h, img.into_bytes())?;
    if let Some(v) = mask.check_range(PLANT_CLASSES.len()) {
        return Err(Error::dataset(path, format!("label value {v} outside 0..=3")));
    }
    Ok(mask)
}

pub const STEMS_HEADER: &str = "id,class,x_px,y_px";

pub fn stems_to_csv(stems: &[GroundTruthStem]) -> String {
    let mut s = format!("{STEMS_HEADER}\n");
    for (i, st) in stems.iter().enumerate() {
        s.push_str(&format!("{i},{},{:.6},{:.6}\n", st.class, st.x, st.y));
    }
    s
}

pub fn read_stems_csv(path: &Path) -> Result<Vec<GroundTruthStem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::dataset(path, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != STEMS_HEADER {
        return Err(Error::dataset(path, format!("header `{header}`, expected `{STEMS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::dataset(path, e.to_string()))?;
        let bad = |what: &str| Error::dataset(path, format!("row {}: bad {what} `{}`", row + 2, rec.as_slice()));
        let class = StemClass::parse(rec[1].trim()).ok_or_else(|| bad("class"))?;
        let x = rec[2].trim().parse().map_err(|_| bad("x_px"))?;
        let y = rec[3].trim().parse().map_err(|_| bad("y_px"))?;
        out.push(GroundTruthStem { class, x, y });
    }
    Ok(out)
}

fn check_stems(path: &Path, stems: &[GroundTruthStem], width: usize, height: usize) -> Result<()> {
    for s in stems {
        let inside = s.x >= 0.0 && s.y >= 0.0 && s.x <= (width - 1) as f64 && s.y <= (height - 1) as f64;
        if !inside {
            return Err(Error::dataset(
                path,
                format!("stem at ({}, {}) outside the {width}x{height} image", s.x, s.y),
            ));
        }
    }
    Ok(())
}

fn ids_in(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::dataset(&path, e.to_string()))?;
    if !(meta.mm_per_pixel > 0.0) {
        return Err(Error::dataset(&path, format!("mm_per_pixel must be positive, got {}", meta.mm_per_pixel)));
    }
    Ok(meta)
}

/// Load and validate every sample under `root`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<(DatasetMeta, Vec<Sample>)> {
    let meta = read_meta(root)?;
    let ids = ids_in(&root.join("images"), "png")?;
    for (dir, ext) in [("labels", "png"), ("stems", "csv")] {
        for id in ids_in(&root.join(dir), ext)? {
            if ids.binary_search(&id).is_err() {
                return Err(Error::dataset(
                    root.join(dir).join(format!("{id}.{ext}")),
                    "no image with this id",
                ));
            }
        }
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = root.join("images").join(format!("{id}.png"));
        let label_path = root.join("labels").join(format!("{id}.png"));
        let stems_path = root.join("stems").join(format!("{id}.csv"));
        for p in [&label_path, &stems_path] {
            if !p.exists() {
                return Err(Error::dataset(p, format!("missing file for image `{id}`")));
            }
        }
        let image = read_image_png(&image_path, meta.channels)?;
        let plant = read_label_png(&label_path)?;
        if plant.width() != image.shape()[2] || plant.height() != image.shape()[1] {
            return Err(Error::dataset(
                &label_path,
                format!(
                    "mask is {}x{}, image is {}x{}",
                    plant.width(),
                    plant.height(),
                    image.shape()[2],
                    image.shape()[1]
                ),
            ));
        }
        let stems = read_stems_csv(&stems_path)?;
        check_stems(&stems_path, &stems, plant.width(), plant.height())?;
        samples.push(Sample {
            id,
            image,
            plant,
            stems,
        });
    }
    Ok((meta, samples))
}

pub fn save_dataset(root: &Path, meta: &DatasetMeta, samples: &[Sample]) -> Result<()> {
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_atomic(&root.join("meta.json"), meta_json.as_bytes())?;
    for s in samples {
        if s.channels() != meta.channels.count() {
            return Err(Error::invalid(
                "save_dataset",
                format!("sample `{}` has {} channels, meta says {}", s.id, s.channels(), meta.channels.count()),
            ));
        }
        write_image_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_label_png(&root.join("labels").join(format!("{}.png", s.id)), &s.plant)?;
        write_atomic(
            &root.join("stems").join(format!("{}.csv", s.id)),
            stems_to_csv(&s.stems).as_bytes(),
        )?;
    }
    Ok(())
}

pub const DEFAULT_STEM_RADIUS: f64 = 5.0;

/// Stem-mask labels: a filled disk `dx² + dy² ≤ r²` around every stem,
/// crop winning where disks of both classes overlap.
pub fn render_stem_regions(stems: &[GroundTruthStem], width: usize, height: usize, radius: f64) -> Result<LabelMask> {
    if !(radius >= 1.0) {
        return Err(Error::invalid("render_stem_regions", format!("radius must be at least 1, got {radius}")));
    }
    let mut mask = LabelMask::filled(width, height, 0);
    for class in [StemClass::Dicot, StemClass::Crop] {
        for s in stems.iter().filter(|s| s.class == class) {
            let y0 = (s.y - radius).ceil().max(0.0) as usize;
            let x0 = (s.x - radius).ceil().max(0.0) as usize;
            let y1 = ((s.y + radius).floor() as isize).min(height as isize - 1);
            let x1 = ((s.x + radius).floor() as isize).min(width as isize - 1);
            for y in y0 as isize..=y1 {
                for x in x0 as isize..=x1 {
                    let (dx, dy) = (x as f64 - s.x, y as f64 - s.y);
                    if dx * dx + dy * dy <= radius * radius {
                        mask.set(x as usize, y as usize, class.stem_label());
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.75,
            val: 0.05,
            test: 0.20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then val and test sizes rounded (at least one each) and
/// the remainder to train. Indices within each part are ascending.
pub fn split_dataset(count: usize, spec: &SplitSpec) -> Result<Split> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|f| !(*f >= 0.0)) || ((spec.train + spec.val + spec.test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split_dataset", format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    if count < 3 {
        return Err(Error::invalid("split_dataset", format!("need at least 3 samples, got {count}")));
    }
    let n_val = ((spec.val * count as f64).round() as usize).max(1);
    let n_test = ((spec.test * count as f64).round() as usize).max(1);
    if n_val + n_test >= count {
        return Err(Error::invalid("split_dataset", format!("{count} samples leave no training data")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = count - n_val - n_test;
    let part = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..count),
    })
}

/// Bilinear image (half-pixel centers), nearest-neighbor mask, stem
/// coordinates scaled by the size ratio.
pub fn resize_to(sample: &Sample, width: usize, height: usize, multiple: usize) -> Result<Sample> {
    for extent in [width, height] {
        if extent == 0 || extent % multiple != 0 {
            return Err(Error::Indivisible { extent, multiple });
        }
    }
    let (c, h0, w0) = (sample.channels(), sample.height(), sample.width());
    if (w0, h0) == (width, height) {
        return Ok(sample.clone());
    }
    let (sx, sy) = (w0 as f64 / width as f64, h0 as f64 / height as f64);
    let src = |d: usize, s: f64, n: usize| {
        let f = ((d as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 1);
        (i, (i + 1).min(n - 1), f - i as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| src(x, sx, w0)).collect();
    let rows: Vec<_> = (0..height).map(|y| src(y, sy, h0)).collect();
    let d = sample.image.data();
    let mut out = Vec::with_capacity(c * width * height);
    for ch in 0..c {
        let plane = &d[ch * h0 * w0..(ch + 1) * h0 * w0];
        for &(y_a, y_b, ty) in &rows {
            for &(x_a, x_b, tx) in &cols {
                let top = plane[y_a * w0 + x_a] * (1.0 - tx) + plane[y_a * w0 + x_b] * tx;
                let bottom = plane[y_b * w0 + x_a] * (1.0 - tx) + plane[y_b * w0 + x_b] * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    let mut plant = LabelMask::filled(width, height, 0);
    for y in 0..height {
        let yy = (((y as f64 + 0.5) * sy) as usize).min(h0 - 1);
        for x in 0..width {
            let xx = (((x as f64 + 0.5) * sx) as usize).min(w0 - 1);
            plant.set(x, y, sample.plant.get(xx, yy));
        }
    }
    let stems = sample
        .stems
        .iter()
        .map(|s| GroundTruthStem {
            class: s.class,
            x: s.x / sx,
            y: s.y / sy,
        })
        .collect();
    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new([c, height, width], out)?,
        plant,
        stems,
    })
}
