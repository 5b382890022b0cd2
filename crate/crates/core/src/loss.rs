//! Training objective: class-weighted cross entropy on the plant mask, a
//! soft intersection-over-union loss on the stem mask, and their convex
//! combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp applied to probabilities before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the plant loss; the stem loss gets `1 - alpha`.
    pub alpha: f64,
    /// Cross-entropy weight per plant class (soil, crop, dicot, grass).
    pub plant_class_weights: [f64; 4],
    /// Stem-mask labels that take part in the IoU.
    pub stem_foreground: Vec<u8>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            plant_class_weights: [1.0, 10.0, 10.0, 10.0],
            stem_foreground: vec![1, 2],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.plant_class_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// `(1 - alpha) * stem + alpha * plant`
pub fn multi_task_loss(stem: f64, plant: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * stem + alpha * plant
}

fn check_target(op: &'static str, dims: [usize; 4], target: &[u8]) -> Result<()> {
    let [b, k, h, w] = dims;
    if target.len() != b * h * w {
        return Err(Error::ShapeMismatch {
            op,
            lhs: dims.to_vec(),
            rhs: vec![target.len()],
        });
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(op, format!("target label {bad} outside 0..{k}")));
    }
    Ok(())
}

struct WeightedCrossEntropy<T> {
    probs: Var,
    target: Vec<u8>,
    weights: Vec<T>,
    dims: [usize; 4],
}

impl<T: Scalar> Function<T> for WeightedCrossEntropy<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.probs]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, k, h, w] = self.dims;
        let plane = h * w;
        let p = graph.value(self.probs).data();
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let n = T::from_usize(b * plane).expect("count");
        let mut g = vec![T::zero(); p.len()];
        for bi in 0..b {
            for px in 0..plane {
                let t = self.target[bi * plane + px] as usize;
                let idx = (bi * k + t) * plane + px;
                if p[idx] > floor {
                    g[idx] = -grad[0] * self.weights[t] / (n * p[idx]);
                }
            }
        }
        vec![Some(g)]
    }
}

struct SoftIou {
    probs: Var,
    target: Vec<u8>,
    foreground: Vec<bool>,
    dims: [usize; 4],
}

impl SoftIou {
    fn terms<T: Scalar>(&self, p: &[T]) -> (T, T) {
        let [b, k, h, w] = self.dims;
        let plane = h * w;
        let mut inter = T::zero();
        let mut union = T::zero();
        for bi in 0..b {
            for c in (0..k).filter(|&c| self.foreground[c]) {
                let off = (bi * k + c) * plane;
                for px in 0..plane {
                    let pv = p[off + px];
                    if self.target[bi * plane + px] as usize == c {
                        inter += pv;
                        union += T::one();
                    } else {
                        union += pv;
                    }
                }
            }
        }
        (inter, union)
    }
}

impl<T: Scalar> Function<T> for SoftIou {
    fn inputs(&self) -> Vec<Var> {
        vec![self.probs]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, k, h, w] = self.dims;
        let plane = h * w;
        let p = graph.value(self.probs).data();
        let (inter, union) = self.terms(p);
        let mut g = vec![T::zero(); p.len()];
        if union > T::zero() {
            let u2 = union * union;
            // d(1 - I/U)/dp = -(t U - I (1 - t)) / U^2
            let hit = -grad[0] / union;
            let miss = grad[0] * inter / u2;
            for bi in 0..b {
                for c in (0..k).filter(|&c| self.foreground[c]) {
                    let off = (bi * k + c) * plane;
                    for px in 0..plane {
                        g[off + px] = if self.target[bi * plane + px] as usize == c {
                            hit
                        } else {
                            miss
                        };
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Graph<T> {
    /// Mean over pixels of `w[target] * -ln(max(p[target], PROB_FLOOR))`.
    /// `target` holds one label per pixel in `[B, H, W]` order.
    pub fn weighted_cross_entropy(&mut self, probs: Var, target: &[u8], weights: &[f64]) -> Result<Var> {
        let dims = self.value(probs).dims4("weighted_cross_entropy")?;
        check_target("weighted_cross_entropy", dims, target)?;
        let [b, k, h, w] = dims;
        if weights.len() != k {
            return Err(Error::invalid(
                "weighted_cross_entropy",
                format!("{} class weights for {k} classes", weights.len()),
            ));
        }
        let weights: Vec<T> = weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let plane = h * w;
        let p = self.value(probs).data();
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let mut total = T::zero();
        for bi in 0..b {
            for px in 0..plane {
                let t = target[bi * plane + px] as usize;
                total += weights[t] * -p[(bi * k + t) * plane + px].max(floor).ln();
            }
        }
        let value = total / T::from_usize(b * plane).expect("count");
        Ok(self.push(
            Tensor::scalar(value),
            Box::new(WeightedCrossEntropy {
                probs,
                target: target.to_vec(),
                weights,
                dims,
            }),
        ))
    }

    /// `1 - I/U` over the foreground classes, with `I = sum(p t)` and
    /// `U = sum(p + t - p t)` taken over the whole batch. Zero when `U = 0`.
    pub fn soft_iou_loss(&mut self, probs: Var, target: &[u8], foreground: &[u8]) -> Result<Var> {
        let dims = self.value(probs).dims4("soft_iou_loss")?;
        check_target("soft_iou_loss", dims, target)?;
        let k = dims[1];
        let mut fg = vec![false; k];
        for &c in foreground {
            let slot = fg.get_mut(c as usize).ok_or_else(|| {
                Error::invalid("soft_iou_loss", format!("foreground class {c} outside 0..{k}"))
            })?;
            *slot = true;
        }
        let op = SoftIou {
            probs,
            target: target.to_vec(),
            foreground: fg,
            dims,
        };
        let (inter, union) = op.terms(self.value(probs).data());
        let value = if union > T::zero() {
            T::one() - inter / union
        } else {
            T::zero()
        };
        Ok(self.push(Tensor::scalar(value), Box::new(op)))
    }

    /// Graph form of [`multi_task_loss`].
    pub fn multi_task_loss(&mut self, stem: Var, plant: Var, alpha: f64) -> Result<Var> {
        let a = self.scale(stem, T::from_f64_lossy(1.0 - alpha));
        let b = self.scale(plant, T::from_f64_lossy(alpha));
        self.add(a, b)
    }
}
