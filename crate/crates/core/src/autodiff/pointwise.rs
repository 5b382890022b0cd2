//! Elementwise operations, reductions, dropout and the channel softmax.

use rand::Rng;

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct LeakyRelu<T> {
    input: Var,
    slope: T,
}

impl<T: Scalar> Function<T> for LeakyRelu<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = graph.value(self.input).data();
        let g = x
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x >= T::zero() { g } else { g * self.slope })
            .collect();
        vec![Some(g)]
    }
}

struct Add {
    lhs: Var,
    rhs: Var,
}

impl<T: Scalar> Function<T> for Add {
    fn inputs(&self) -> Vec<Var> {
        vec![self.lhs, self.rhs]
    }

    fn backward(&self, _graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

struct Mul {
    lhs: Var,
    rhs: Var,
}

impl<T: Scalar> Function<T> for Mul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.lhs, self.rhs]
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let a = graph.value(self.lhs).data();
        let b = graph.value(self.rhs).data();
        let ga = b.iter().zip(grad).map(|(&b, &g)| b * g).collect();
        let gb = a.iter().zip(grad).map(|(&a, &g)| a * g).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct Scale<T> {
    input: Var,
    factor: T,
}

impl<T: Scalar> Function<T> for Scale<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.factor).collect())]
    }
}

struct Sum {
    input: Var,
    len: usize,
}

impl<T: Scalar> Function<T> for Sum {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; self.len])]
    }
}

struct Masked<T> {
    input: Var,
    mask: Vec<T>,
}

impl<T: Scalar> Function<T> for Masked<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

struct Softmax {
    input: Var,
    dims: [usize; 4],
}

impl<T: Scalar> Function<T> for Softmax {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _graph: &Graph<T>, output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, k, h, w] = self.dims;
        let plane = h * w;
        let y = output.data();
        let mut gx = vec![T::zero(); y.len()];
        for bi in 0..b {
            let base = bi * k * plane;
            let mut inner = vec![T::zero(); plane];
            for c in 0..k {
                let off = base + c * plane;
                for p in 0..plane {
                    inner[p] += grad[off + p] * y[off + p];
                }
            }
            for c in 0..k {
                let off = base + c * plane;
                for p in 0..plane {
                    gx[off + p] = y[off + p] * (grad[off + p] - inner[p]);
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let value = self
            .value(input)
            .map(|x| if x >= T::zero() { x } else { slope * x });
        self.push(value, Box::new(LeakyRelu { input, slope }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("add", lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let data = a.data().iter().zip(b).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(value, Box::new(Add { lhs, rhs })))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("mul", lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let data = a.data().iter().zip(b).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(value, Box::new(Mul { lhs, rhs })))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Box::new(Scale { input, factor }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let (len, total) = (t.numel(), t.sum());
        self.push(Tensor::scalar(total), Box::new(Sum { input, len }))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Inference (or `p == 0`)
    /// returns the input unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(input).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Box::new(Masked { input, mask })))
    }

    /// Softmax over the channel axis of a `[B,K,H,W]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims4("softmax")?;
        let [b, k, h, w] = dims;
        if k < 2 {
            return Err(Error::invalid("softmax", format!("needs at least 2 channels, got {k}")));
        }
        let plane = h * w;
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let base = bi * k * plane;
            for p in 0..plane {
                let mut m = T::neg_infinity();
                for c in 0..k {
                    m = m.max(xd[base + c * plane + p]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xd[base + c * plane + p] - m).exp();
                    out[base + c * plane + p] = e;
                    z += e;
                }
                let inv = T::one() / z;
                for c in 0..k {
                    out[base + c * plane + p] *= inv;
                }
            }
        }
        let value = Tensor::new(vec![b, k, h, w], out)?;
        Ok(self.push(value, Box::new(Softmax { input, dims })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_relu_values_and_slope_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y).data(), &[2.0, -0.01]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.01]);
    }

    #[test]
    fn dropout_eval_and_zero_p_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let t = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f32);
        let x = g.param(t.clone());
        let y = g.dropout(x, 1.0 / 3.0, false, &mut rng).unwrap();
        assert_eq!(g.value(y), &t);
        let z = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(g.value(z), &t);
    }

    #[test]
    fn dropout_zero_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![100_000], 1.0));
        let y = g.dropout(x, 1.0 / 3.0, true, &mut rng).unwrap();
        let out = g.value(y).data();
        let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / out.len() as f64;
        assert!((zeros - 0.333).abs() < 0.01, "zero fraction {zeros}");
        assert!(out.iter().all(|&v| v == 0.0 || (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3]));
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 4, 1, 1], 0.7));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![1f64.ln(), 3f64.ln()]).unwrap());
        let y = g.softmax(x).unwrap();
        let p = g.value(y).data();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);

        let base = Tensor::new(vec![1, 3, 1, 2], vec![0.1, -2.0, 3.0, 0.5, 1.0, 1.0]).unwrap();
        let a = g.constant(base.clone());
        let b = g.constant(base.map(|v| v + 100.0));
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_single_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(g.softmax(x).is_err());
    }
}
