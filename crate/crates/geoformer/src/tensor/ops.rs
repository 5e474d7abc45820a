//! Eagerly evaluated op recording. Each method validates shapes, computes the
//! result values in a fixed sequential order, and appends one node.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::elem::Elem;
use super::op::Op;
use super::shape::{broadcastable, fmt_shape, next_index, numel, strides};
use super::Tensor;

fn unary_map<E: Elem>(t: &Tensor<E>, op: Op<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let (vals, rg) = t.tape.with(|inner| {
        let n = &inner.nodes[t.id];
        (n.values.iter().map(|&v| f(v)).collect(), n.requires_grad)
    });
    t.tape.push(vals, t.shape.clone(), op, rg)
}

fn binary_map<E: Elem>(
    name: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: Op<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    a.check_same_tape(b)?;
    if a.shape != b.shape {
        return Err(Error::shape(
            name,
            format!("{} vs {}", fmt_shape(&a.shape), fmt_shape(&b.shape)),
        ));
    }
    let (vals, rg) = a.tape.with(|inner| {
        let na = &inner.nodes[a.id];
        let nb = &inner.nodes[b.id];
        let vals = na
            .values
            .iter()
            .zip(&nb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        (vals, na.requires_grad || nb.requires_grad)
    });
    Ok(a.tape.push(vals, a.shape.clone(), op, rg))
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_map("add", self, other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_map("sub", self, other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_map("mul", self, other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn neg(&self) -> Tensor<E> {
        unary_map(self, Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        unary_map(self, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        unary_map(self, Op::AddScalar(self.id, c), |x| x + c)
    }

    pub fn exp(&self) -> Tensor<E> {
        unary_map(self, Op::Exp(self.id), |x| x.exp())
    }

    pub fn sqrt(&self) -> Tensor<E> {
        unary_map(self, Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn square(&self) -> Tensor<E> {
        unary_map(self, Op::Square(self.id), |x| x * x)
    }

    pub fn abs(&self) -> Tensor<E> {
        unary_map(self, Op::Abs(self.id), |x| x.abs())
    }

    /// sign in {-1, 0, 1}; not differentiable (derivative taken as 0).
    pub fn sign(&self) -> Tensor<E> {
        unary_map(self, Op::Sign(self.id), |x| {
            if x > E::zero() {
                E::one()
            } else if x < E::zero() {
                -E::one()
            } else {
                E::zero()
            }
        })
    }

    /// Heaviside step (1 for x > 0); not differentiable.
    pub fn step(&self) -> Tensor<E> {
        unary_map(self, Op::Step(self.id), |x| {
            if x > E::zero() {
                E::one()
            } else {
                E::zero()
            }
        })
    }

    /// Guarded reciprocal: 1/x, with 0 -> 0 so masked zero distances stay
    /// finite end to end.
    pub fn recip_guard(&self) -> Tensor<E> {
        unary_map(self, Op::RecipGuard(self.id), |x| {
            if x == E::zero() {
                E::zero()
            } else {
                x.recip()
            }
        })
    }

    pub fn erf(&self) -> Tensor<E> {
        unary_map(self, Op::Erf(self.id), |x| x.erf())
    }

    pub fn relu(&self) -> Tensor<E> {
        unary_map(self, Op::Relu(self.id), |x| x.max(E::zero()))
    }

    /// Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2))). Built from
    /// primitives, so second derivatives are exact.
    pub fn gelu(&self) -> Tensor<E> {
        let inner = self.scale(1.0 / std::f64::consts::SQRT_2).erf().add_scalar(1.0);
        self.scale(0.5)
            .mul(&inner)
            .expect("gelu shapes always agree")
    }

    /// Gated GELU over the last axis: splits into halves a, b and returns
    /// a * gelu(b).
    pub fn geglu(&self) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::shape("geglu", "input must have at least one axis"));
        }
        let last = self.shape[rank - 1];
        if last == 0 || last % 2 != 0 {
            return Err(Error::shape(
                "geglu",
                format!("last extent {last} is not even in {}", fmt_shape(&self.shape)),
            ));
        }
        let half = last / 2;
        let a = self.slice_axis(rank - 1, 0, half)?;
        let b = self.slice_axis(rank - 1, half, half)?;
        a.mul(&b.gelu())
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::shape("layer_norm", "scalar input"));
        }
        let d = self.shape[rank - 1];
        if d == 0 {
            return Err(Error::shape("layer_norm", "last extent is zero"));
        }
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {} / bias {} do not match feature dim {d}",
                    fmt_shape(&gain.shape),
                    fmt_shape(&bias.shape)
                ),
            ));
        }
        let mut row_shape = self.shape.clone();
        row_shape[rank - 1] = 1;
        let mu = self
            .mean_axis(rank - 1)?
            .reshape(&row_shape)?
            .broadcast_to(&self.shape)?;
        let centered = self.sub(&mu)?;
        let var = centered.square().mean_axis(rank - 1)?;
        let inv = var
            .add_scalar(eps)
            .sqrt()
            .recip_guard()
            .reshape(&row_shape)?
            .broadcast_to(&self.shape)?;
        let normed = centered.mul(&inv)?;
        let g = gain.broadcast_to(&self.shape)?;
        let b = bias.broadcast_to(&self.shape)?;
        normed.mul(&g)?.add(&b)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", fmt_shape(&self.shape), fmt_shape(shape)),
            ));
        }
        let (vals, rg) = self.tape.with(|inner| {
            let n = &inner.nodes[self.id];
            (n.values.clone(), n.requires_grad)
        });
        Ok(self
            .tape
            .push(vals, shape.to_vec(), Op::Reshape(self.id), rg))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} invalid for {}", fmt_shape(&self.shape)),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let (vals, rg) = self.tape.with(|inner| {
            let n = &inner.nodes[self.id];
            let mut out = vec![E::zero(); n.values.len()];
            if !out.is_empty() {
                let mut idx = vec![0usize; rank];
                let mut o = 0usize;
                loop {
                    let mut src = 0usize;
                    for (k, &ax) in axes.iter().enumerate() {
                        src += idx[k] * in_strides[ax];
                    }
                    out[o] = n.values[src];
                    o += 1;
                    if !next_index(&mut idx, &out_shape) {
                        break;
                    }
                }
            }
            (out, n.requires_grad)
        });
        Ok(self
            .tape
            .push(vals, out_shape, Op::Permute(self.id, axes.to_vec()), rg))
    }

    /// Swap the last two axes (matrix transpose on the trailing matrix).
    pub fn transpose_last(&self) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        if rank < 2 {
            return Err(Error::shape(
                "transpose_last",
                format!("rank {rank} < 2"),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    /// Right-aligned broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if !broadcastable(&self.shape, shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{} -> {}", fmt_shape(&self.shape), fmt_shape(shape)),
            ));
        }
        let off = shape.len() - self.shape.len();
        let in_strides = strides(&self.shape);
        let (vals, rg) = self.tape.with(|inner| {
            let n = &inner.nodes[self.id];
            let total = numel(shape);
            let mut out = vec![E::zero(); total];
            if total > 0 {
                let mut idx = vec![0usize; shape.len()];
                let mut o = 0usize;
                loop {
                    let mut src = 0usize;
                    for (i, s) in in_strides.iter().enumerate() {
                        if self.shape[i] != 1 {
                            src += idx[off + i] * s;
                        }
                    }
                    out[o] = n.values[src];
                    o += 1;
                    if !next_index(&mut idx, shape) {
                        break;
                    }
                }
            }
            (out, n.requires_grad)
        });
        Ok(self
            .tape
            .push(vals, shape.to_vec(), Op::BroadcastTo(self.id), rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {}", fmt_shape(&self.shape)),
            ));
        }
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let n_axis = self.shape[axis];
        let in_strides = strides(&self.shape);
        let ax_stride = in_strides[axis];
        let (vals, rg) = self.tape.with(|inner| {
            let n = &inner.nodes[self.id];
            let total = numel(&out_shape);
            let mut out = vec![E::zero(); total];
            if total > 0 {
                let mut idx = vec![0usize; out_shape.len()];
                let mut o = 0usize;
                loop {
                    let mut base = 0usize;
                    let mut k = 0usize;
                    for i in 0..rank {
                        if i == axis {
                            continue;
                        }
                        base += idx[k] * in_strides[i];
                        k += 1;
                    }
                    let mut acc = E::zero();
                    for j in 0..n_axis {
                        acc = acc + n.values[base + j * ax_stride];
                    }
                    out[o] = acc;
                    o += 1;
                    if !next_index(&mut idx, &out_shape) {
                        break;
                    }
                }
            }
            (out, n.requires_grad)
        });
        Ok(self
            .tape
            .push(vals, out_shape, Op::SumAxis(self.id, axis), rg))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let n = *self.shape.get(axis).ok_or_else(|| {
            Error::shape(
                "mean_axis",
                format!("axis {axis} out of range for {}", fmt_shape(&self.shape)),
            )
        })?;
        if n == 0 {
            return Err(Error::shape("mean_axis", "zero-length axis"));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        self.reshape(&[self.numel()])?.sum_axis(0)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let rank = self.shape.len();
        if axis >= rank || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!(
                    "slice [{start}, {start}+{len}) on axis {axis} of {}",
                    fmt_shape(&self.shape)
                ),
            ));
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        // outer: dims before axis (flattened); inner: contiguous run after it
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let src_block = self.shape[axis] * inner;
        let dst_block = len * inner;
        let (vals, rg) = self.tape.with(|tape| {
            let n = &tape.nodes[self.id];
            let mut out = vec![E::zero(); numel(&out_shape)];
            for ob in 0..outer {
                let src_base = ob * src_block + start * inner;
                let dst_base = ob * dst_block;
                out[dst_base..dst_base + dst_block]
                    .copy_from_slice(&n.values[src_base..src_base + dst_block]);
            }
            (out, n.requires_grad)
        });
        Ok(self.tape.push(
            vals,
            out_shape,
            Op::SliceAxis {
                src: self.id,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    /// Matrix product. Supports `[.., m, k] x [k, n]` (shared right operand)
    /// and `[L.., m, k] x [L.., k, n]` (matching batch dims).
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_tape(other)?;
        let (a_shape, b_shape) = (&self.shape, &other.shape);
        let a_rank = a_shape.len();
        let b_rank = b_shape.len();
        let mismatch = || {
            Error::shape(
                "matmul",
                format!("{} x {}", fmt_shape(a_shape), fmt_shape(b_shape)),
            )
        };
        if a_rank < 2 || b_rank < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a_shape[a_rank - 2], a_shape[a_rank - 1]);
        let (kb, n) = (b_shape[b_rank - 2], b_shape[b_rank - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let b_batched = if b_rank == 2 {
            false
        } else if a_rank == b_rank && a_shape[..a_rank - 2] == b_shape[..b_rank - 2] {
            true
        } else {
            return Err(mismatch());
        };
        let batch: usize = a_shape[..a_rank - 2].iter().product();
        let mut out_shape = a_shape[..a_rank - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let (vals, rg) = self.tape.with(|inner| {
            let na = &inner.nodes[self.id];
            let nb = &inner.nodes[other.id];
            let mut out = vec![E::zero(); batch * m * n];
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if b_batched { bi * k * n } else { 0 };
                let o_off = bi * m * n;
                for i in 0..m {
                    for p in 0..k {
                        let av = na.values[a_off + i * k + p];
                        if av == E::zero() {
                            continue;
                        }
                        let row = &nb.values[b_off + p * n..b_off + (p + 1) * n];
                        let dst = &mut out[o_off + i * n..o_off + (i + 1) * n];
                        for (d, &bv) in dst.iter_mut().zip(row) {
                            *d = *d + av * bv;
                        }
                    }
                }
            }
            (out, na.requires_grad || nb.requires_grad)
        });
        Ok(self
            .tape
            .push(vals, out_shape, Op::Matmul(self.id, other.id), rg))
    }

    /// Softmax over the last axis with a 0/1 mask. Masked positions get
    /// exactly zero weight; rows with no unmasked position come out all-zero.
    pub fn masked_softmax(&self, mask: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_tape(mask)?;
        let mask = if mask.shape == self.shape {
            mask.clone()
        } else if broadcastable(&mask.shape, &self.shape) {
            mask.broadcast_to(&self.shape)?
        } else {
            return Err(Error::shape(
                "masked_softmax",
                format!(
                    "mask {} does not broadcast to logits {}",
                    fmt_shape(&mask.shape),
                    fmt_shape(&self.shape)
                ),
            ));
        };
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::shape("masked_softmax", "scalar logits"));
        }
        let row = self.shape[rank - 1];
        let (vals, rg) = self.tape.with(|inner| {
            let nl = &inner.nodes[self.id];
            let nm = &inner.nodes[mask.id];
            let mut out = vec![E::zero(); nl.values.len()];
            let rows = if row == 0 { 0 } else { nl.values.len() / row };
            for r in 0..rows {
                let lo = r * row;
                let logits = &nl.values[lo..lo + row];
                let msk = &nm.values[lo..lo + row];
                let mut max: Option<E> = None;
                for j in 0..row {
                    if msk[j] != E::zero() {
                        max = Some(match max {
                            Some(m) => m.max(logits[j]),
                            None => logits[j],
                        });
                    }
                }
                let Some(max) = max else { continue }; // fully masked row -> zeros
                let mut denom = E::zero();
                for j in 0..row {
                    if msk[j] != E::zero() {
                        let e = (logits[j] - max).exp();
                        out[lo + j] = e;
                        denom = denom + e;
                    }
                }
                for j in 0..row {
                    if msk[j] != E::zero() {
                        out[lo + j] = out[lo + j] / denom;
                    }
                }
            }
            (out, nl.requires_grad)
        });
        Ok(self.tape.push(
            vals,
            self.shape.clone(),
            Op::MaskedSoftmax {
                logits: self.id,
                mask: mask.id,
            },
            rg,
        ))
    }
}

/// Concatenate along `axis`. All other extents must agree.
pub fn concat<E: Elem>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".to_string()))?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for {}", fmt_shape(&first.shape)),
        ));
    }
    let mut total = 0usize;
    for p in parts {
        first.check_same_tape(p)?;
        if p.shape.len() != rank
            || (0..rank).any(|i| i != axis && p.shape[i] != first.shape[i])
        {
            return Err(Error::shape(
                "concat",
                format!("{} vs {}", fmt_shape(&first.shape), fmt_shape(&p.shape)),
            ));
        }
        total += p.shape[axis];
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = total;
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let (vals, rg) = first.tape.with(|tape| {
        let mut out = vec![E::zero(); numel(&out_shape)];
        let mut rg = false;
        let row_out = total * inner;
        let mut offset = 0usize;
        for p in parts {
            let n = &tape.nodes[p.id];
            rg |= n.requires_grad;
            let row_in = p.shape[axis] * inner;
            for ob in 0..outer {
                let dst = ob * row_out + offset;
                out[dst..dst + row_in]
                    .copy_from_slice(&n.values[ob * row_in..(ob + 1) * row_in]);
            }
            offset += row_in;
        }
        (out, rg)
    });
    Ok(first.tape.push(
        vals,
        out_shape,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

/// Integer row gather from a learnable table: out[r, :] = table[ids[r], :],
/// reshaped to `id_shape + [row_dim]`.
pub fn gather_rows<E: Elem>(
    table: &Tensor<E>,
    ids: &[usize],
    id_shape: &[usize],
) -> Result<Tensor<E>> {
    if table.shape.len() != 2 {
        return Err(Error::shape(
            "gather_rows",
            format!("table must be 2-d, got {}", fmt_shape(&table.shape)),
        ));
    }
    if ids.len() != numel(id_shape) {
        return Err(Error::shape(
            "gather_rows",
            format!("{} ids do not fill {}", ids.len(), fmt_shape(id_shape)),
        ));
    }
    let (rows, dim) = (table.shape[0], table.shape[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return Err(Error::Data(format!(
            "gather index {bad} out of vocabulary (table has {rows} rows)"
        )));
    }
    let mut out_shape = id_shape.to_vec();
    out_shape.push(dim);
    let (vals, rg) = table.tape.with(|inner| {
        let n = &inner.nodes[table.id];
        let mut out = vec![E::zero(); ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim].copy_from_slice(&n.values[id * dim..(id + 1) * dim]);
        }
        (out, n.requires_grad)
    });
    Ok(table.tape.push(
        vals,
        out_shape,
        Op::Gather {
            table: table.id,
            ids: Rc::new(ids.to_vec()),
        },
        rg,
    ))
}

/// Transpose of [`gather_rows`]: scatter-add rows of `src` into a fresh
/// zero table. Used by the backward pass; exposed for tests.
pub fn scatter_rows<E: Elem>(
    src: &Tensor<E>,
    ids: Rc<Vec<usize>>,
    rows: usize,
) -> Result<Tensor<E>> {
    if src.shape.len() != 2 || src.shape[0] != ids.len() {
        return Err(Error::shape(
            "scatter_rows",
            format!(
                "src {} does not match {} ids",
                fmt_shape(&src.shape),
                ids.len()
            ),
        ));
    }
    let dim = src.shape[1];
    let (vals, rg) = src.tape.with(|inner| {
        let n = &inner.nodes[src.id];
        let mut out = vec![E::zero(); rows * dim];
        for (r, &id) in ids.iter().enumerate() {
            let dst = &mut out[id * dim..(id + 1) * dim];
            let s = &n.values[r * dim..(r + 1) * dim];
            for (d, &v) in dst.iter_mut().zip(s) {
                *d = *d + v;
            }
        }
        (out, n.requires_grad)
    });
    Ok(src.tape.push(
        vals,
        vec![rows, dim],
        Op::ScatterRows { src: src.id, ids },
        rg,
    ))
}
