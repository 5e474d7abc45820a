//! Dense tensors on a reverse-mode differentiation tape.
//!
//! The tape is an append-only arena of eagerly evaluated nodes. Calling
//! [`Tape::backward`] emits the vector-Jacobian products as *new tape nodes*,
//! so gradients are themselves differentiable: a second backward pass through
//! a first one is valid (and is how force-matching losses are trained).
//! Nesting is capped at two backward passes per tape.
//!
//! A tape and its tensors are confined to a single thread. Reductions run in
//! a fixed sequential element order, so identical inputs produce bit-identical
//! results.

mod backward;
mod elem;
mod ops;
mod op;
pub mod shape;

pub use backward::Gradients;
pub use elem::Elem;
pub use ops::{concat, gather_rows, scatter_rows};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use op::Op;
use shape::{fmt_shape, numel};

pub(crate) struct Node<E: Elem> {
    pub values: Vec<E>,
    pub shape: Vec<usize>,
    pub op: Op<E>,
    /// True when this node is a differentiable leaf or depends on one.
    pub requires_grad: bool,
}

pub(crate) struct TapeInner<E: Elem> {
    pub nodes: Vec<Node<E>>,
    pub backward_passes: u8,
}

/// Shared handle to the recording arena. Cloning is cheap.
pub struct Tape<E: Elem> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Elem> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node. Cloning aliases the same node.
pub struct Tensor<E: Elem> {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) tape: Tape<E>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            id: self.id,
            shape: self.shape.clone(),
            tape: self.tape.clone(),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_passes: 0,
            })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub(crate) fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(
        &self,
        values: Vec<E>,
        shape: Vec<usize>,
        op: Op<E>,
        requires_grad: bool,
    ) -> Tensor<E> {
        debug_assert_eq!(values.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            values,
            shape: shape.clone(),
            op,
            requires_grad,
        });
        Tensor {
            id,
            shape,
            tape: self.clone(),
        }
    }

    /// Differentiable input tensor.
    pub fn leaf(&self, values: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if values.len() != numel(shape) {
            return Err(Error::shape(
                "leaf",
                format!(
                    "{} values do not fill shape {}",
                    values.len(),
                    fmt_shape(shape)
                ),
            ));
        }
        Ok(self.push(values, shape.to_vec(), Op::Leaf, true))
    }

    /// Non-differentiable input tensor.
    pub fn constant(&self, values: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if values.len() != numel(shape) {
            return Err(Error::shape(
                "constant",
                format!(
                    "{} values do not fill shape {}",
                    values.len(),
                    fmt_shape(shape)
                ),
            ));
        }
        Ok(self.push(values, shape.to_vec(), Op::Constant, false))
    }

    pub fn scalar(&self, v: f64) -> Tensor<E> {
        self.push(vec![E::from_f64(v)], vec![], Op::Constant, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<E> {
        self.push(
            vec![E::zero(); numel(shape)],
            shape.to_vec(),
            Op::Constant,
            false,
        )
    }

    pub fn ones(&self, shape: &[usize]) -> Tensor<E> {
        self.push(
            vec![E::one(); numel(shape)],
            shape.to_vec(),
            Op::Constant,
            false,
        )
    }

    /// Constant tensor from f64 data (batch plumbing convenience).
    pub fn constant_f64(&self, values: &[f64], shape: &[usize]) -> Result<Tensor<E>> {
        self.constant(values.iter().map(|&v| E::from_f64(v)).collect(), shape)
    }

    pub(crate) fn with<R>(&self, f: impl FnOnce(&TapeInner<E>) -> R) -> R {
        f(&self.inner.borrow())
    }
}

impl<E: Elem> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with(|t| t.nodes[self.id].requires_grad)
    }

    pub fn tape(&self) -> Tape<E> {
        self.tape.clone()
    }

    /// Copy the element values out of the tape.
    pub fn values(&self) -> Vec<E> {
        self.tape.with(|t| t.nodes[self.id].values.clone())
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.tape
            .with(|t| t.nodes[self.id].values.iter().map(|v| v.as_f64()).collect())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {}",
                fmt_shape(&self.shape)
            )));
        }
        Ok(self.tape.with(|t| t.nodes[self.id].values[0]))
    }

    pub fn is_finite(&self) -> bool {
        self.tape
            .with(|t| t.nodes[self.id].values.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor<E>) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Contract(
                "tensors participate in different tapes".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_bad_element_count() {
        let tape: Tape<f64> = Tape::new();
        assert!(tape.leaf(vec![1.0, 2.0], &[3]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let tape: Tape<f64> = Tape::new();
        let s = tape.scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn cross_tape_ops_are_rejected() {
        let t1: Tape<f64> = Tape::new();
        let t2: Tape<f64> = Tape::new();
        let a = t1.ones(&[2]);
        let b = t2.ones(&[2]);
        assert!(a.add(&b).is_err());
    }
}
