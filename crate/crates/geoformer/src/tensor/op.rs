//! Primitive operations recorded on the tape.
//!
//! Every differentiable primitive carries enough metadata for the backward
//! pass to re-emit its vector-Jacobian product as further tape operations,
//! which is what makes the backward pass itself differentiable (one level of
//! nesting, as needed to train on predicted forces).

use std::rc::Rc;

use super::elem::Elem;

#[derive(Debug, Clone)]
pub(crate) enum Op<E: Elem> {
    /// Differentiable input (parameters, positions).
    Leaf,
    /// Non-differentiable input (data, masks, seeds).
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddScalar(usize, E),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    SumAxis(usize, usize),
    SliceAxis {
        src: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    /// sign(x) in {-1, 0, 1}; derivative treated as zero everywhere.
    Sign(usize),
    /// 1 for x > 0 else 0; derivative treated as zero everywhere.
    Step(usize),
    /// 1/x with the convention 0 -> 0 so masked diagonals never produce NaN.
    RecipGuard(usize),
    Erf(usize),
    Relu(usize),
    MaskedSoftmax {
        logits: usize,
        mask: usize,
    },
    /// Row gather from a table: out[r, :] = table[ids[r], :].
    Gather {
        table: usize,
        ids: Rc<Vec<usize>>,
    },
    /// Transpose of Gather: out[ids[r], :] += src[r, :] over a fresh zero
    /// table. Only produced by the backward pass.
    ScatterRows {
        src: usize,
        ids: Rc<Vec<usize>>,
    },
}

impl<E: Elem> Op<E> {
    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumAxis(a, _)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::Step(a)
            | Op::RecipGuard(a)
            | Op::Erf(a)
            | Op::Relu(a) => vec![*a],
            Op::SliceAxis { src, .. } => vec![*src],
            Op::Concat { parts, .. } => parts.clone(),
            Op::MaskedSoftmax { logits, mask } => vec![*logits, *mask],
            Op::Gather { table, .. } => vec![*table],
            Op::ScatterRows { src, .. } => vec![*src],
        }
    }
}
