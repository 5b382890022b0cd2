//! Per-channel batch normalization over `[B,C,H,W]` tensors.

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Running per-channel moments used at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; zero means uninitialized.
    pub updates: u64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Exponential moving average: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchMoments<T>, momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + take * b;
        }
        self.updates += 1;
    }
}

/// Moments of one training batch, reported back to the caller so it can
/// fold them into its running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by previously accumulated running statistics.
    Eval(&'a BatchNormStats<T>),
}

struct BatchNorm<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    dims: [usize; 4],
    train: bool,
}

impl<T: Scalar> Function<T> for BatchNorm<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.gamma, self.beta]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.dims;
        let plane = h * w;
        let gamma = graph.value(self.gamma).data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let g = &grad[off..off + plane];
                let xh = &self.xhat[off..off + plane];
                sum_g[ci] += g.iter().copied().sum::<T>();
                sum_gx[ci] += super::dot(g, xh);
            }
        }
        let gin = graph.requires_grad(self.input).then(|| {
            let m = T::from_usize(b * plane).expect("count");
            let mut gin = vec![T::zero(); grad.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    let k = gamma[ci] * self.inv_std[ci];
                    if self.train {
                        let mg = sum_g[ci] / m;
                        let mgx = sum_gx[ci] / m;
                        for p in off..off + plane {
                            gin[p] = k * (grad[p] - mg - self.xhat[p] * mgx);
                        }
                    } else {
                        for p in off..off + plane {
                            gin[p] = k * grad[p];
                        }
                    }
                }
            }
            gin
        });
        vec![gin, Some(sum_gx), Some(sum_g)]
    }
}

impl<T: Scalar> Graph<T> {
    /// `gamma * (x - mean) / sqrt(var + epsilon) + beta` per channel. In
    /// training mode the batch moments (over B, H, W) are also returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        epsilon: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        if epsilon <= T::zero() {
            return Err(Error::invalid("batch_norm", "epsilon must be positive"));
        }
        let x = self.value(input);
        let dims = x.dims4("batch_norm")?;
        let [b, c, h, w] = dims;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let plane = h * w;
        let xd = x.data();
        let (mean, var, moments) = match mode {
            NormMode::Eval(stats) => {
                if !stats.is_initialized() {
                    return Err(Error::UninitializedRunningStats("batch_norm".into()));
                }
                if stats.mean.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        lhs: vec![c],
                        rhs: vec![stats.mean.len()],
                    });
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
            NormMode::Train => {
                let m = b * plane;
                let mf = T::from_usize(m).expect("count");
                let mut mean = vec![T::zero(); c];
                for bi in 0..b {
                    for (ci, mu) in mean.iter_mut().enumerate() {
                        let off = (bi * c + ci) * plane;
                        *mu += xd[off..off + plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / mf);
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        let mu = mean[ci];
                        var[ci] += xd[off..off + plane]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>();
                    }
                }
                let unbiased = if m > 1 {
                    let d = T::from_usize(m - 1).expect("count");
                    var.iter().map(|&v| v / d).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v = *v / mf);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(moments))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in off..off + plane {
                    let v = (xd[p] - mean[ci]) * inv_std[ci];
                    xhat[p] = v;
                    out[p] = g[ci] * v + bt[ci];
                }
            }
        }
        let value = Tensor::new(dims.to_vec(), out)?;
        let var_out = self.push(
            value,
            Box::new(BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
                train: matches!(mode, NormMode::Train),
            }),
        );
        Ok((var_out, moments))
    }
}
