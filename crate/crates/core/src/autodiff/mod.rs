//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to a [`Graph`]. Node ids are assigned in
//! execution order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] simply walks it in reverse. Gradients flowing into a
//! node from several consumers are summed.

mod conv;
mod norm;
mod pointwise;
mod shape;

pub use conv::{Padding, conv_output_extent};
pub use norm::{BatchMoments, BatchNormStats, NormMode};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub(crate) trait Function<T: Scalar> {
    fn inputs(&self) -> Vec<Var>;

    /// Vector-Jacobian product: one gradient per entry of `inputs()`, or
    /// `None` where the input does not need one.
    fn backward(&self, graph: &Graph<T>, output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    function: Option<Box<dyn Function<T>>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            function: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].take()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, function: Box<dyn Function<T>>) -> Var {
        let requires_grad = function
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            function: requires_grad.then_some(function),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Leaves that require a gradient end up
    /// holding `d loss / d leaf`; intermediate gradients are released once
    /// they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);

        for index in (0..=loss.0).rev() {
            let Some(grad) = pending[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            match &node.function {
                None => {
                    self.grads[index] = Some(Tensor::new(node.value.shape().to_vec(), grad)?);
                }
                Some(function) => {
                    let inputs = function.inputs();
                    let input_grads = function.backward(self, &node.value, &grad);
                    debug_assert_eq!(inputs.len(), input_grads.len());
                    for (input, g) in inputs.into_iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.len(), self.nodes[input.0].value.numel());
                        match &mut pending[input.0] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dot product with a fixed reduction order.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_accumulates_over_both_operands() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_receives_summed_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let sa = g.sum(a);
        let sb = g.sum(b);
        let l = g.add(sa, sb).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
