use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct Concat {
    inputs: Vec<Var>,
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}

impl<T: Scalar> Function<T> for Concat {
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, graph: &Graph<T>, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.inputs.len());
        for (&input, &c) in self.inputs.iter().zip(&self.channels) {
            if !graph.requires_grad(input) {
                grads.push(None);
                offset += c;
                continue;
            }
            let mut g = Vec::with_capacity(self.batch * c * self.plane);
            for b in 0..self.batch {
                let start = (b * total + offset) * self.plane;
                g.extend_from_slice(&grad[start..start + c * self.plane]);
            }
            grads.push(Some(g));
            offset += c;
        }
        grads
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenate `[B,C_i,H,W]` tensors along the channel axis, in order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let [batch, _, h, w] = self.value(first).dims4("concat")?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [b, c, hh, ww] = self.value(v).dims4("concat")?;
            if (b, hh, ww) != (batch, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            channels.push(c);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![batch, total, h, w], data)?;
        Ok(self.push(
            value,
            Box::new(Concat {
                inputs: inputs.to_vec(),
                channels,
                batch,
                plane,
            }),
        ))
    }
}
