//! Stem positions from the stem-mask probabilities: per-pixel argmax,
//! 8-connected components per stem class, and the probability-weighted
//! mean of each component's pixel coordinates.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::classes::{LabelMask, StemClass};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel distribution over {soil, crop stem, dicot stem}, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMask {
    width: usize,
    height: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMask {
    pub fn new(classes: usize, width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != classes * width * height || classes == 0 {
            return Err(Error::invalid(
                "probability mask",
                format!("{classes}x{height}x{width} mask given {} values", probs.len()),
            ));
        }
        Ok(ProbabilityMask {
            width,
            height,
            classes,
            probs,
        })
    }

    /// From a `[K, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [k, h, w] => Self::new(k, w, h, t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Err(Error::invalid(
                "probability mask",
                format!("expected [K, H, W], got {:?}", t.shape()),
            )),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prob(&self, class: usize, x: usize, y: usize) -> f64 {
        self.probs[(class * self.height + y) * self.width + x]
    }

    pub fn channel(&self, class: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.probs[class * plane..(class + 1) * plane]
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_mask(mask: &ProbabilityMask) -> LabelMask {
    let plane = mask.width * mask.height;
    let mut labels = vec![0u8; plane];
    for (px, label) in labels.iter_mut().enumerate() {
        let mut best = mask.probs[px];
        for c in 1..mask.classes {
            let p = mask.probs[c * plane + px];
            if p > best {
                best = p;
                *label = c as u8;
            }
        }
    }
    LabelMask::new(mask.width, mask.height, labels).expect("consistent extents")
}

/// A maximal 8-connected set of pixels sharing one label.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub class: u8,
    /// `(x, y)` coordinates in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// `P(class | pixel)` for each entry of `pixels`.
    pub probs: Vec<f64>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// 8-connected components of `class` in `labels`, ordered by their first
/// pixel in row-major order. `probs` (if given) fills [`Component::probs`].
pub fn connected_components(labels: &LabelMask, class: u8, probs: Option<&ProbabilityMask>) -> Vec<Component> {
    let (w, h) = (labels.width(), labels.height());
    let data = labels.data();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || data[start] != class {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && data[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        members.sort_unstable();
        let pixels: Vec<(usize, usize)> = members.iter().map(|&i| (i % w, i / w)).collect();
        let probs = match probs {
            Some(m) => pixels.iter().map(|&(x, y)| m.prob(class as usize, x, y)).collect(),
            None => vec![1.0; pixels.len()],
        };
        out.push(Component {
            class,
            pixels,
            probs,
        });
    }
    out
}

/// `sum(p * x) / sum(p)` over the component's pixels, as `(x, y)`.
pub fn weighted_centroid(comp: &Component) -> Result<(f64, f64)> {
    if comp.pixels.is_empty() {
        return Err(Error::invalid("weighted_centroid", "empty component"));
    }
    let (mut sx, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&(x, y), &p) in comp.pixels.iter().zip(&comp.probs) {
        sx += p * x as f64;
        sy += p * y as f64;
        sp += p;
    }
    if sp <= 0.0 {
        return Err(Error::invalid("weighted_centroid", "component has zero probability mass"));
    }
    Ok((sx / sp, sy / sp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Components smaller than this many pixels are discarded.
    pub min_area: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { min_area: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemDetection {
    pub class: StemClass,
    /// Sub-pixel column.
    pub x: f64,
    /// Sub-pixel row.
    pub y: f64,
    /// Mean `P(class | pixel)` over the component.
    pub confidence: f64,
    pub area: usize,
}

/// Full extraction pipeline; detections sorted by descending confidence
/// (stable, crop components before dicot ones on ties).
pub fn extract_stems(mask: &ProbabilityMask, cfg: &ExtractConfig) -> Result<Vec<StemDetection>> {
    if cfg.min_area == 0 {
        return Err(Error::invalid("extract_stems", "min_area must be at least 1"));
    }
    let labels = argmax_mask(mask);
    let mut dets = Vec::new();
    for class in StemClass::ALL {
        let label = class.stem_label();
        if label as usize >= mask.classes {
            continue;
        }
        for comp in connected_components(&labels, label, Some(mask)) {
            if comp.area() < cfg.min_area {
                continue;
            }
            let (x, y) = weighted_centroid(&comp)?;
            let confidence = comp.probs.iter().sum::<f64>() / comp.area() as f64;
            dets.push(StemDetection {
                class,
                x,
                y,
                confidence,
                area: comp.area(),
            });
        }
    }
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(dets)
}

pub const DETECTIONS_HEADER: &str = "image_id,class,x_px,y_px,confidence,area_px";

/// Detections of one image tagged with its id.
pub type ImageDetections = (String, Vec<StemDetection>);

pub fn write_detections_csv<W: Write>(out: W, images: &[ImageDetections]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{DETECTIONS_HEADER}")?;
    for (id, dets) in images {
        for d in dets {
            writeln!(
                out,
                "{id},{},{:.6},{:.6},{:.6},{}",
                d.class, d.x, d.y, d.confidence, d.area
            )?;
        }
    }
    out.flush()
}

/// Parse a detections CSV into `(image_id, detection)` rows in file order.
pub fn read_detections_csv<R: Read>(input: R) -> Result<Vec<(String, StemDetection)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::invalid("detections csv", e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != DETECTIONS_HEADER {
        return Err(Error::invalid(
            "detections csv",
            format!("header `{headers}`, expected `{DETECTIONS_HEADER}`"),
        ));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid("detections csv", e.to_string()))?;
        let bad = |what: &str| Error::invalid("detections csv", format!("row {}: bad {what}", line + 2));
        let class = StemClass::parse(&rec[1]).ok_or_else(|| bad("class"))?;
        let num = |i: usize, what: &str| rec[i].trim().parse::<f64>().map_err(|_| bad(what));
        rows.push((
            rec[0].to_string(),
            StemDetection {
                class,
                x: num(2, "x_px")?,
                y: num(3, "y_px")?,
                confidence: num(4, "confidence")?,
                area: rec[5].trim().parse().map_err(|_| bad("area_px"))?,
            },
        ));
    }
    Ok(rows)
}
