//! Reverse pass: walks the tape in reverse topological order (descending node
//! id) and emits each op's vector-Jacobian product as new tape nodes. The
//! resulting gradients are ordinary tensors, so a second backward pass through
//! them is valid; a third is rejected.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::elem::Elem;
use super::op::Op;
use super::ops::{concat, gather_rows, scatter_rows};
use super::{Tape, Tensor};

/// Gradient tensors keyed by the leaf they belong to. Every requested leaf is
/// present; leaves the loss does not depend on map to zeros.
pub struct Gradients<E: Elem> {
    tape: Tape<E>,
    map: HashMap<usize, usize>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, leaf: &Tensor<E>) -> Option<Tensor<E>> {
        self.map.get(&leaf.id).map(|&gid| self.tape.tensor_handle(gid))
    }
}

impl<E: Elem> Tape<E> {
    pub(crate) fn tensor_handle(&self, id: usize) -> Tensor<E> {
        let shape = self.with(|t| t.nodes[id].shape.clone());
        Tensor {
            id,
            shape,
            tape: self.clone(),
        }
    }

    /// Gradients of a scalar with respect to every requires-grad leaf.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        self.backward_impl(loss, None)
    }

    /// Gradients of a scalar with respect to the given leaves only. Pruning
    /// to the requested leaves keeps the emitted backward graph minimal.
    pub fn backward_wrt(&self, loss: &Tensor<E>, wrt: &[&Tensor<E>]) -> Result<Gradients<E>> {
        self.backward_impl(loss, Some(wrt))
    }

    fn backward_impl(&self, loss: &Tensor<E>, wrt: Option<&[&Tensor<E>]>) -> Result<Gradients<E>> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::Contract("loss lives on a different tape".to_string()));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward input must be a scalar, got shape {:?}",
                loss.shape
            )));
        }
        {
            let mut inner = self.inner.borrow_mut();
            if inner.backward_passes >= 2 {
                return Err(Error::UnsupportedDepth);
            }
            inner.backward_passes += 1;
        }

        let loss_id = loss.id;
        let targets: Vec<usize> = match wrt {
            Some(ts) => {
                let mut ids = Vec::with_capacity(ts.len());
                for t in ts {
                    if !self.same_tape(&t.tape) {
                        return Err(Error::Contract(
                            "gradient target lives on a different tape".to_string(),
                        ));
                    }
                    let is_leaf =
                        self.with(|inner| matches!(inner.nodes[t.id].op, Op::Leaf));
                    if !is_leaf {
                        return Err(Error::Contract(
                            "gradient target is not a requires-grad leaf".to_string(),
                        ));
                    }
                    ids.push(t.id);
                }
                ids
            }
            None => self.with(|inner| {
                inner
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
                    .map(|(i, _)| i)
                    .collect()
            }),
        };

        // need[n]: some target leaf is reachable from n via parent edges.
        let n_nodes = loss_id + 1;
        let mut need = vec![false; n_nodes];
        for &t in &targets {
            if t < n_nodes {
                need[t] = true;
            }
        }
        self.with(|inner| {
            for id in 0..n_nodes {
                if need[id] || !inner.nodes[id].requires_grad {
                    continue;
                }
                need[id] = inner.nodes[id].op.parents().iter().any(|&p| need[p]);
            }
        });

        let mut grads: HashMap<usize, usize> = HashMap::new();
        let seed = self.ones(&loss.shape);
        grads.insert(loss_id, seed.id);

        for id in (0..n_nodes).rev() {
            if !need[id] {
                continue;
            }
            let Some(&gid) = grads.get(&id) else { continue };
            for (pid, cid) in emit_vjp(self, id, gid, &need)? {
                match grads.entry(pid) {
                    Entry::Occupied(mut e) => {
                        let sum = self.tensor_handle(*e.get()).add(&self.tensor_handle(cid))?;
                        e.insert(sum.id);
                    }
                    Entry::Vacant(v) => {
                        v.insert(cid);
                    }
                }
            }
        }

        let mut map = HashMap::new();
        for &t in &targets {
            let gid = match grads.get(&t) {
                Some(&g) => g,
                None => {
                    let shape = self.with(|inner| inner.nodes[t].shape.clone());
                    self.zeros(&shape).id
                }
            };
            map.insert(t, gid);
        }
        Ok(Gradients {
            tape: self.clone(),
            map,
        })
    }
}

fn emit_vjp<E: Elem>(
    tape: &Tape<E>,
    id: usize,
    gid: usize,
    need: &[bool],
) -> Result<Vec<(usize, usize)>> {
    let op = tape.with(|inner| inner.nodes[id].op.clone());
    let g = tape.tensor_handle(gid);
    let out = tape.tensor_handle(id);
    let want = |p: usize| need[p];
    let mut res: Vec<(usize, usize)> = Vec::new();

    match op {
        Op::Leaf | Op::Constant | Op::Sign(_) | Op::Step(_) => {}
        Op::Add(a, b) => {
            if want(a) {
                res.push((a, g.id));
            }
            if want(b) {
                res.push((b, g.id));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                res.push((a, g.id));
            }
            if want(b) {
                res.push((b, g.neg().id));
            }
        }
        Op::Neg(a) => {
            if want(a) {
                res.push((a, g.neg().id));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                res.push((a, g.mul(&tape.tensor_handle(b))?.id));
            }
            if want(b) {
                res.push((b, g.mul(&tape.tensor_handle(a))?.id));
            }
        }
        Op::Scale(a, c) => {
            if want(a) {
                res.push((a, g.scale(c.as_f64()).id));
            }
        }
        Op::AddScalar(a, _) => {
            if want(a) {
                res.push((a, g.id));
            }
        }
        Op::Matmul(a, b) => {
            let ta = tape.tensor_handle(a);
            let tb = tape.tensor_handle(b);
            if want(a) {
                // dA = g . B^T, same batching case as the forward product
                res.push((a, g.matmul(&tb.transpose_last()?)?.id));
            }
            if want(b) {
                let a_rank = ta.shape.len();
                if tb.shape.len() == 2 && a_rank > 2 {
                    // shared right operand: fold all leading dims into rows
                    let k = ta.shape[a_rank - 1];
                    let n = g.shape[g.shape.len() - 1];
                    let rows = ta.numel() / k;
                    let a_flat = ta.reshape(&[rows, k])?;
                    let g_flat = g.reshape(&[rows, n])?;
                    res.push((b, a_flat.transpose_last()?.matmul(&g_flat)?.id));
                } else {
                    res.push((b, ta.transpose_last()?.matmul(&g)?.id));
                }
            }
        }
        Op::Permute(a, axes) => {
            if want(a) {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                res.push((a, g.permute(&inv)?.id));
            }
        }
        Op::Reshape(a) => {
            if want(a) {
                let orig = tape.with(|inner| inner.nodes[a].shape.clone());
                res.push((a, g.reshape(&orig)?.id));
            }
        }
        Op::BroadcastTo(a) => {
            if want(a) {
                let from = tape.with(|inner| inner.nodes[a].shape.clone());
                let to = out.shape.clone();
                let off = to.len() - from.len();
                let mut r = g;
                for _ in 0..off {
                    r = r.sum_axis(0)?;
                }
                let mut removed = 0usize;
                for i in 0..from.len() {
                    if from[i] == 1 && to[off + i] != 1 {
                        r = r.sum_axis(i - removed)?;
                        removed += 1;
                    }
                }
                res.push((a, r.reshape(&from)?.id));
            }
        }
        Op::SumAxis(a, axis) => {
            if want(a) {
                let orig = tape.with(|inner| inner.nodes[a].shape.clone());
                let mut keep = orig.clone();
                keep[axis] = 1;
                res.push((a, g.reshape(&keep)?.broadcast_to(&orig)?.id));
            }
        }
        Op::SliceAxis {
            src,
            axis,
            start,
            len,
        } => {
            if want(src) {
                let orig = tape.with(|inner| inner.nodes[src].shape.clone());
                let after = orig[axis] - start - len;
                let mut parts: Vec<Tensor<E>> = Vec::new();
                if start > 0 {
                    let mut s = orig.clone();
                    s[axis] = start;
                    parts.push(tape.zeros(&s));
                }
                parts.push(g.clone());
                if after > 0 {
                    let mut s = orig.clone();
                    s[axis] = after;
                    parts.push(tape.zeros(&s));
                }
                let refs: Vec<&Tensor<E>> = parts.iter().collect();
                res.push((src, concat(&refs, axis)?.id));
            }
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0usize;
            for p in parts {
                let len = tape.with(|inner| inner.nodes[p].shape[axis]);
                if want(p) {
                    res.push((p, g.slice_axis(axis, offset, len)?.id));
                }
                offset += len;
            }
        }
        Op::Exp(a) => {
            if want(a) {
                res.push((a, g.mul(&out)?.id));
            }
        }
        Op::Sqrt(a) => {
            if want(a) {
                // guarded at sqrt(0): masked diagonal distances get gradient 0
                res.push((a, g.mul(&out.recip_guard().scale(0.5))?.id));
            }
        }
        Op::Square(a) => {
            if want(a) {
                res.push((a, g.mul(&tape.tensor_handle(a).scale(2.0))?.id));
            }
        }
        Op::Abs(a) => {
            if want(a) {
                res.push((a, g.mul(&tape.tensor_handle(a).sign())?.id));
            }
        }
        Op::RecipGuard(a) => {
            if want(a) {
                // -out^2 is exactly 0 at the guarded point, so no NaN leaks
                res.push((a, g.mul(&out.square())?.neg().id));
            }
        }
        Op::Erf(a) => {
            if want(a) {
                let x = tape.tensor_handle(a);
                let c = 2.0 / std::f64::consts::PI.sqrt();
                res.push((a, g.mul(&x.square().neg().exp().scale(c))?.id));
            }
        }
        Op::Relu(a) => {
            if want(a) {
                res.push((a, g.mul(&tape.tensor_handle(a).step())?.id));
            }
        }
        Op::MaskedSoftmax { logits, .. } => {
            if want(logits) {
                // dL = y * (g - rowsum(g * y)); zero rows stay zero
                let y = out;
                let rank = y.shape.len();
                let gy = g.mul(&y)?;
                let mut keep = y.shape.clone();
                keep[rank - 1] = 1;
                let row = gy.sum_axis(rank - 1)?.reshape(&keep)?.broadcast_to(&y.shape)?;
                res.push((logits, y.mul(&g.sub(&row)?)?.id));
            }
        }
        Op::Gather { table, ids } => {
            if want(table) {
                let (rows, dim) =
                    tape.with(|inner| (inner.nodes[table].shape[0], inner.nodes[table].shape[1]));
                let flat = g.reshape(&[ids.len(), dim])?;
                res.push((table, scatter_rows(&flat, ids, rows)?.id));
            }
        }
        Op::ScatterRows { src, ids } => {
            if want(src) {
                let src_shape = tape.with(|inner| inner.nodes[src].shape.clone());
                let t = gather_rows(&g, &ids, &[ids.len()])?;
                res.push((src, t.reshape(&src_shape)?.id));
            }
        }
    }
    Ok(res)
}
