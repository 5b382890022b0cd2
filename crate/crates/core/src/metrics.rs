//! Detection and segmentation evaluation: radius matching of stem
//! detections, all-point interpolated AP, mAP, MAD and pixel-wise AP.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classes::{LabelMask, StemClass, PLANT_CLASSES};
use crate::error::{Error, Result};
use crate::stemextract::{ProbabilityMask, StemDetection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStem {
    pub class: StemClass,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub theta_mm: f64,
    pub mm_per_pixel: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            theta_mm: 10.0,
            mm_per_pixel: 1.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_mm > 0.0) {
            return Err(Error::invalid("match config", format!("theta must be positive, got {}", self.theta_mm)));
        }
        if !(self.mm_per_pixel > 0.0) {
            return Err(Error::invalid(
                "match config",
                format!("mm_per_pixel must be positive, got {}", self.mm_per_pixel),
            ));
        }
        Ok(())
    }
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub class: StemClass,
    pub confidence: f64,
    /// Index into the detection list as given.
    pub detection: usize,
    /// Matched ground-truth index and distance in mm, for true positives.
    pub ground_truth: Option<(usize, f64)>,
}

impl Match {
    pub fn is_tp(&self) -> bool {
        self.ground_truth.is_some()
    }
}

/// Greedy matching in descending confidence order (ties by detection
/// index). Each detection claims the nearest unassigned ground truth of its
/// class if that lies strictly closer than theta.
pub fn match_detections(dets: &[StemDetection], gts: &[GroundTruthStem], cfg: &MatchConfig) -> Result<Vec<Match>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class != d.class {
                continue;
            }
            let dist = (d.x - g.x).hypot(d.y - g.y) * cfg.mm_per_pixel;
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        let ground_truth = best.filter(|&(_, dist)| dist < cfg.theta_mm);
        if let Some((j, _)) = ground_truth {
            taken[j] = true;
        }
        out.push(Match {
            class: d.class,
            confidence: d.confidence,
            detection: i,
            ground_truth,
        });
    }
    Ok(out)
}

/// Ranked TP/FP outcomes together with the number of ground truths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    ranked: Vec<(f64, bool)>,
    num_gt: usize,
}

impl PrCurve {
    /// Rank `outcomes` by descending confidence, stable in the given order.
    pub fn new(mut outcomes: Vec<(f64, bool)>, num_gt: usize) -> Self {
        outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
        PrCurve {
            ranked: outcomes,
            num_gt,
        }
    }

    /// From outcomes that are already in rank order.
    pub fn from_ranked(tp: &[bool], num_gt: usize) -> Self {
        PrCurve {
            ranked: tp.iter().map(|&t| (0.0, t)).collect(),
            num_gt,
        }
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }

    pub fn ranked(&self) -> &[(f64, bool)] {
        &self.ranked
    }

    /// `(recall, precision)` after each ranked detection.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.ranked
            .iter()
            .enumerate()
            .map(|(k, &(_, t))| {
                tp += t as usize;
                (tp as f64 / self.num_gt as f64, tp as f64 / (k + 1) as f64)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "recall,precision")?;
        for (r, p) in self.points() {
            writeln!(out, "{r:.6},{p:.6}")?;
        }
        out.flush()
    }
}

/// Area under the all-point interpolated precision/recall curve.
pub fn average_precision(curve: &PrCurve) -> Result<f64> {
    if curve.num_gt == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one ground truth".into(),
        ));
    }
    let points = curve.points();
    // Interpolated precision: running maximum from the tail.
    let mut envelope = vec![0.0f64; points.len()];
    let mut run = 0.0f64;
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        run = run.max(p);
        envelope[k] = run;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev {
            ap += (r - prev) * envelope[k];
            prev = r;
        }
    }
    Ok(ap)
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("mean average precision of no classes".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean true-positive distance; `None` without true positives.
pub fn mad(tp_distances_mm: &[f64]) -> Option<f64> {
    if tp_distances_mm.is_empty() {
        None
    } else {
        Some(tp_distances_mm.iter().sum::<f64>() / tp_distances_mm.len() as f64)
    }
}

/// Every pixel ranked by `P(class | pixel)`, positive iff labeled `class`.
pub fn pixel_curve(probs: &ProbabilityMask, target: &LabelMask, class: u8) -> Result<PrCurve> {
    let mut acc = PixelAccumulator::new(probs.classes());
    acc.add(probs, target)?;
    acc.curve(class)
}

pub fn pixel_ap(probs: &ProbabilityMask, target: &LabelMask, class: u8) -> Result<f64> {
    average_precision(&pixel_curve(probs, target, class)?)
}

/// Pools pixel rankings over many images.
#[derive(Debug, Clone)]
pub struct PixelAccumulator {
    scores: Vec<Vec<(f32, bool)>>,
    positives: Vec<usize>,
}

impl PixelAccumulator {
    pub fn new(classes: usize) -> Self {
        PixelAccumulator {
            scores: vec![Vec::new(); classes],
            positives: vec![0; classes],
        }
    }

    pub fn add(&mut self, probs: &ProbabilityMask, target: &LabelMask) -> Result<()> {
        if probs.width() != target.width() || probs.height() != target.height() {
            return Err(Error::ShapeMismatch {
                op: "pixel_ap",
                lhs: vec![probs.height(), probs.width()],
                rhs: vec![target.height(), target.width()],
            });
        }
        if probs.classes() != self.scores.len() {
            return Err(Error::invalid(
                "pixel_ap",
                format!("{} classes given, accumulator has {}", probs.classes(), self.scores.len()),
            ));
        }
        if let Some(v) = target.check_range(self.scores.len()) {
            return Err(Error::invalid("pixel_ap", format!("target label {v} out of range")));
        }
        for (c, scores) in self.scores.iter_mut().enumerate() {
            for (&p, &t) in probs.channel(c).iter().zip(target.data()) {
                let hit = t as usize == c;
                self.positives[c] += hit as usize;
                scores.push((p as f32, hit));
            }
        }
        Ok(())
    }

    pub fn curve(&self, class: u8) -> Result<PrCurve> {
        let c = class as usize;
        if c >= self.scores.len() {
            return Err(Error::invalid("pixel_ap", format!("class {class} out of range")));
        }
        if self.positives[c] == 0 {
            return Err(Error::UndefinedMetric(format!(
                "class {class} absent from the target, pixel AP undefined"
            )));
        }
        Ok(PrCurve::new(
            self.scores[c].iter().map(|&(p, t)| (p as f64, t)).collect(),
            self.positives[c],
        ))
    }

    pub fn ap(&self, class: u8) -> Result<f64> {
        average_precision(&self.curve(class)?)
    }
}

/// Pools stem matches over many images; ties across images keep image order.
#[derive(Debug, Clone, Default)]
pub struct StemAccumulator {
    outcomes: BTreeMap<StemClass, Vec<(f64, bool)>>,
    num_gt: BTreeMap<StemClass, usize>,
    distances: BTreeMap<StemClass, Vec<f64>>,
}

impl StemAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, dets: &[StemDetection], gts: &[GroundTruthStem], cfg: &MatchConfig) -> Result<()> {
        let matches = match_detections(dets, gts, cfg)?;
        for m in matches {
            self.outcomes.entry(m.class).or_default().push((m.confidence, m.is_tp()));
            if let Some((_, d)) = m.ground_truth {
                self.distances.entry(m.class).or_default().push(d);
            }
        }
        for g in gts {
            *self.num_gt.entry(g.class).or_default() += 1;
        }
        Ok(())
    }

    pub fn curve(&self, class: StemClass) -> PrCurve {
        PrCurve::new(
            self.outcomes.get(&class).cloned().unwrap_or_default(),
            self.num_gt.get(&class).copied().unwrap_or(0),
        )
    }

    pub fn num_gt(&self, class: StemClass) -> usize {
        self.num_gt.get(&class).copied().unwrap_or(0)
    }

    pub fn distances(&self, class: StemClass) -> &[f64] {
        self.distances.get(&class).map_or(&[], |v| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemClassReport {
    pub class: StemClass,
    pub ground_truths: usize,
    pub ap: f64,
    pub mad_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelClassReport {
    pub class: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stem_map: Option<f64>,
    pub stems: Vec<StemClassReport>,
    pub seg_map: Option<f64>,
    pub segmentation: Vec<PixelClassReport>,
}

impl EvalReport {
    /// Classes with no ground truth anywhere are left out of the means.
    pub fn build(stems: &StemAccumulator, pixels: Option<&PixelAccumulator>) -> Result<Self> {
        let mut stem_rows = Vec::new();
        for class in StemClass::ALL {
            if stems.num_gt(class) == 0 {
                continue;
            }
            stem_rows.push(StemClassReport {
                class,
                ground_truths: stems.num_gt(class),
                ap: average_precision(&stems.curve(class))?,
                mad_mm: mad(stems.distances(class)),
            });
        }
        let stem_map = mean_average_precision(&stem_rows.iter().map(|r| r.ap).collect::<Vec<_>>()).ok();
        let mut seg_rows = Vec::new();
        if let Some(acc) = pixels {
            for (c, name) in PLANT_CLASSES.iter().enumerate() {
                if c < acc.positives.len() && acc.positives[c] > 0 {
                    seg_rows.push(PixelClassReport {
                        class: name.to_string(),
                        ap: acc.ap(c as u8)?,
                    });
                }
            }
        }
        let seg_map = mean_average_precision(&seg_rows.iter().map(|r| r.ap).collect::<Vec<_>>()).ok();
        Ok(EvalReport {
            stem_map,
            stems: stem_rows,
            seg_map,
            segmentation: seg_rows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, percentages with one decimal.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mm = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut header = vec!["stem mAP".to_string()];
        let mut row = vec![pct(self.stem_map)];
        for r in &self.stems {
            header.push(format!("{} AP", r.class));
            row.push(pct(Some(r.ap)));
            header.push(format!("{} MAD", r.class));
            row.push(mm(r.mad_mm));
        }
        let mut seg_header = vec!["seg mAP".to_string()];
        let mut seg_row = vec![pct(self.seg_map)];
        for r in &self.segmentation {
            seg_header.push(format!("{} AP", r.class));
            seg_row.push(pct(Some(r.ap)));
        }
        let mut out = String::new();
        for (h, r) in [(header, row), (seg_header, seg_row)] {
            let widths: Vec<usize> = h.iter().zip(&r).map(|(a, b)| a.len().max(b.len())).collect();
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c:>w$}"))
                    .collect::<Vec<_>>()
                    .join(" | ")
            };
            out.push_str(&line(&h));
            out.push('\n');
            out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
            out.push('\n');
            out.push_str(&line(&r));
            out.push_str("\n\n");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    }
}
