//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a closure mapping the output gradient to parent gradients. The graph is
//! rebuilt for every forward pass. Nodes are appended in evaluation order, so
//! walking the tape backwards visits them in reverse topological order.

pub mod check;
mod ops;
pub mod optim;

pub use ops::{AngleReadout, PoolKind};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that evaluates operations but records no backward rules.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: self.record,
            backward: None,
        })
    }

    /// Append an operation node. The output must be finite; a non-finite
    /// value is reported as an error naming `op`.
    pub(crate) fn op<'g>(
        &'g self,
        op: &str,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var<'g, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let nodes = self.nodes.borrow();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs)?;
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

/// Result of [`Graph::backward`]. Leaves keep their gradients; interior
/// gradients are released as the tape is unwound.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Tensor<T> {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(0);
        let x = g.leaf(Tensor::randn(&[3, 4], &mut rng));
        let loss = x.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[3, 4]));
    }

    #[test]
    fn half_square_gives_identity() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(1);
        let xv = Tensor::randn(&[5], &mut rng);
        let x = g.leaf(xv.clone());
        let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[4], 3.0));
        let y = x.add(x).unwrap();
        let grads = g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(x), Tensor::full(&[4], 2.0));
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let unused = g.leaf(Tensor::ones(&[3]));
        let grads = g.backward(x.sum().unwrap()).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let x = g.leaf(Tensor::ones(&[2]));
        let grads = g.backward(c.mul(x).unwrap().sum().unwrap()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x), Tensor::ones(&[2]));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = x.silu().unwrap();
        assert!(!y.requires_grad());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2], f32::MAX));
        assert!(matches!(x.add(x), Err(Error::NonFinite(_))));
    }
}
