//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes recorded before it.
//!
//! ```
//! use lifseg::autodiff::{DenseArray, Tape};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(DenseArray::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
//! let y = tape.relu(x);
//! let loss = tape.mean_all(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[0.0, 1.0 / 3.0, 1.0 / 3.0]);
//! ```

mod array;
mod ops;
mod optim;

pub use array::DenseArray;
pub use optim::{glorot_uniform, sgd_step};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs available to an op's backward rule.
pub struct BackwardCtx<'a, T: Real> {
    /// Upstream gradient, shaped like `output`.
    pub grad: &'a DenseArray<T>,
    pub output: &'a DenseArray<T>,
    pub inputs: Vec<&'a DenseArray<T>>,
    /// Whether each input needs a gradient at all.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded op.
pub trait Backward<T: Real> {
    /// One entry per input; `None` where `needs` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<DenseArray<T>>>;
}

struct Node<T: Real> {
    value: DenseArray<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Records forward values and how to differentiate them.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op whose backward rule lives outside this module.
    pub fn custom(&mut self, parents: &[Var], value: DenseArray<T>, rule: Box<dyn Backward<T>>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, parents.to_vec(), Some(rule), requires_grad)
    }

    fn push(
        &mut self,
        value: DenseArray<T>,
        parents: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::NotScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::full(root.shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = &node.rule else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = rule.backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<DenseArray<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&DenseArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> DenseArray<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(tape.shape(v).to_vec()))
    }
}
