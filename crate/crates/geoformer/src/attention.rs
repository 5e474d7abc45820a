//! Multi-head self-attention with distance conditioning.
//!
//! Four switchable variants share the same projections and masking:
//!
//! * `SumIn`     — the learned distance term is added to the logits inside
//!                 the softmax;
//! * `MatExp`    — omega * exp(-D) is added to the softmax output (rows no
//!                 longer sum to one, deliberately);
//! * `SumOutLm`  — like `MatExp` but with the learned metric net on D;
//! * `GatedLm`   — the softmax output is gated elementwise by the squared
//!                 metric of the squared inverse distance, the mechanism the
//!                 model trains with by default.
//!
//! The diagonal self term is masked for every variant, and the gate's
//! diagonal entries are forced to zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    SumIn,
    MatExp,
    SumOutLm,
    GatedLm,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttentionVariant::SumIn => "sum_in",
            AttentionVariant::MatExp => "mat_exp",
            AttentionVariant::SumOutLm => "sum_out_lm",
            AttentionVariant::GatedLm => "gated_lm",
        };
        f.write_str(s)
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_in" => Ok(AttentionVariant::SumIn),
            "mat_exp" => Ok(AttentionVariant::MatExp),
            "sum_out_lm" => Ok(AttentionVariant::SumOutLm),
            "gated_lm" => Ok(AttentionVariant::GatedLm),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?} \
                 (expected sum_in | mat_exp | sum_out_lm | gated_lm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricAct {
    Relu,
    Gelu,
}

impl fmt::Display for MetricAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricAct::Relu => "relu",
            MetricAct::Gelu => "gelu",
        })
    }
}

impl FromStr for MetricAct {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(MetricAct::Relu),
            "gelu" => Ok(MetricAct::Gelu),
            other => Err(Error::Config(format!(
                "unknown metric activation {other:?} (expected relu | gelu)"
            ))),
        }
    }
}

/// Bound parameter tensors of one block's attention sub-layer.
pub struct BlockAttention<E: Elem> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    /// Per-block metric net 1 -> hidden -> heads; absent for `MatExp`.
    pub metric: Option<MetricNet<E>>,
}

pub struct MetricNet<E: Elem> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttendConfig {
    pub heads: usize,
    pub variant: AttentionVariant,
    pub metric_act: MetricAct,
    pub omega: Option<f64>,
}

/// Inspection dumps for one block: softmax similarities, the distance term
/// (gate or additive), and their combination, each `[B, h, N, N]`.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub shape: [usize; 4],
    pub pre: Vec<f64>,
    pub gate: Vec<f64>,
    pub post: Vec<f64>,
}

impl AttentionMaps {
    /// Average over the head axis -> [B, N, N].
    pub fn head_average(values: &[f64], shape: [usize; 4]) -> Vec<f64> {
        let [b, h, n, _] = shape;
        let mut out = vec![0.0; b * n * n];
        for bi in 0..b {
            for hi in 0..h {
                for x in 0..n * n {
                    out[bi * n * n + x] += values[(bi * h + hi) * n * n + x] / h as f64;
                }
            }
        }
        out
    }
}

/// Elementwise metric net mapped over a `[B, N, N]` tensor, one output per
/// head: returns `[B, h, N, N]`.
pub fn metric_heads<E: Elem>(
    net: &MetricNet<E>,
    x: &Tensor<E>,
    heads: usize,
    act: MetricAct,
) -> Result<Tensor<E>> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let total = x.numel();
    let hidden = net.b1.shape()[0];
    let flat = x.reshape(&[total, 1])?;
    let pre = flat
        .matmul(&net.w1)?
        .add(&net.b1.broadcast_to(&[total, hidden])?)?;
    let h1 = match act {
        MetricAct::Relu => pre.relu(),
        MetricAct::Gelu => pre.gelu(),
    };
    let out = h1
        .matmul(&net.w2)?
        .add(&net.b2.broadcast_to(&[total, heads])?)?;
    out.reshape(&[b, n, n, heads])?.permute(&[0, 3, 1, 2])
}

/// The gating tensor of the final variant: squared metric of the squared
/// inverse distance, diagonal and padding forced to zero. Non-negative by
/// construction.
pub fn metric_gate<E: Elem>(
    net: &MetricNet<E>,
    dist: &Tensor<E>,
    pair_mask: &Tensor<E>,
    heads: usize,
    act: MetricAct,
) -> Result<Tensor<E>> {
    let (b, n) = (dist.shape()[0], dist.shape()[1]);
    // zero-guarded reciprocal: diagonal and padded distances map to input 0
    let inv_sq = dist.recip_guard().square();
    let psi = metric_heads(net, &inv_sq, heads, act)?;
    let mask4 = pair_mask
        .reshape(&[b, 1, n, n])?
        .broadcast_to(&[b, heads, n, n])?;
    psi.square().mul(&mask4)
}

/// One attention sub-layer over pre-normalized inputs.
///
/// `pair_mask` is `[B, N, N]` with 1 exactly where both atoms are real and
/// i != j. Returns the output `[B, N, d]` and, when `capture` is set, the
/// three inspection map families.
pub fn attend<E: Elem>(
    p: &BlockAttention<E>,
    y: &Tensor<E>,
    dist: &Tensor<E>,
    pair_mask: &Tensor<E>,
    cfg: &AttendConfig,
    capture: bool,
) -> Result<(Tensor<E>, Option<AttentionMaps>)> {
    let (b, n, d) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let h = cfg.heads;
    if d % h != 0 {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {h} heads"
        )));
    }
    let dh = d / h;

    let split = |t: Tensor<E>| -> Result<Tensor<E>> {
        t.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3])
    };
    let q = split(y.matmul(&p.wq)?)?;
    let k = split(y.matmul(&p.wk)?)?;
    let v = split(y.matmul(&p.wv)?)?;

    let mut logits = q
        .matmul(&k.transpose_last()?)?
        .scale(1.0 / (dh as f64).sqrt());
    let mask4 = pair_mask
        .reshape(&[b, 1, n, n])?
        .broadcast_to(&[b, h, n, n])?;

    let metric = |input: &Tensor<E>| -> Result<Tensor<E>> {
        let net = p.metric.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "attention variant {} requires a metric net",
                cfg.variant
            ))
        })?;
        metric_heads(net, input, h, cfg.metric_act)
    };

    if cfg.variant == AttentionVariant::SumIn {
        // the learned term joins the logits; masking still wins
        logits = logits.add(&metric(dist)?)?;
    }
    let softmax = logits.masked_softmax(&mask4)?;

    let (weights, gate_maps) = match cfg.variant {
        AttentionVariant::SumIn => (softmax.clone(), mask4.clone()),
        AttentionVariant::MatExp => {
            let omega = cfg.omega.ok_or_else(|| {
                Error::Config("mat_exp attention requires omega".to_string())
            })?;
            let term = dist
                .neg()
                .exp()
                .scale(omega)
                .reshape(&[b, 1, n, n])?
                .broadcast_to(&[b, h, n, n])?
                .mul(&mask4)?;
            (softmax.add(&term)?, term)
        }
        AttentionVariant::SumOutLm => {
            let term = metric(dist)?.mul(&mask4)?;
            (softmax.add(&term)?, term)
        }
        AttentionVariant::GatedLm => {
            let net = p.metric.as_ref().ok_or_else(|| {
                Error::Config("gated_lm attention requires a metric net".to_string())
            })?;
            let gate = metric_gate(net, dist, pair_mask, h, cfg.metric_act)?;
            (softmax.mul(&gate)?, gate)
        }
    };

    let ctx = weights.matmul(&v)?; // [B, h, N, dh]
    let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
    let out = merged.matmul(&p.wo)?;

    let maps = capture.then(|| AttentionMaps {
        shape: [b, h, n, n],
        pre: softmax.values_f64(),
        gate: gate_maps.values_f64(),
        post: weights.values_f64(),
    });
    Ok((out, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
    }

    fn block(tape: &Tape<f64>, rng: &mut ChaCha8Rng, d: usize, h: usize) -> BlockAttention<f64> {
        let hidden = 5;
        BlockAttention {
            wq: tape.constant(rand_vec(rng, d * d), &[d, d]).unwrap(),
            wk: tape.constant(rand_vec(rng, d * d), &[d, d]).unwrap(),
            wv: tape.constant(rand_vec(rng, d * d), &[d, d]).unwrap(),
            wo: tape.constant(rand_vec(rng, d * d), &[d, d]).unwrap(),
            metric: Some(MetricNet {
                w1: tape.constant(rand_vec(rng, hidden), &[1, hidden]).unwrap(),
                b1: tape.constant(rand_vec(rng, hidden), &[hidden]).unwrap(),
                w2: tape.constant(rand_vec(rng, hidden * h), &[hidden, h]).unwrap(),
                b2: tape.constant(rand_vec(rng, h), &[h]).unwrap(),
            }),
        }
    }

    /// Identity metric per head: psi(x) = relu(x) = x for x >= 0, exactly.
    fn identity_metric(tape: &Tape<f64>, h: usize, hidden: usize) -> MetricNet<f64> {
        let mut w1 = vec![0.0; hidden];
        w1[0] = 1.0;
        let mut w2 = vec![0.0; hidden * h];
        for hi in 0..h {
            w2[hi] = 1.0; // first hidden unit feeds every head
        }
        MetricNet {
            w1: tape.constant(w1, &[1, hidden]).unwrap(),
            b1: tape.zeros(&[hidden]),
            w2: tape.constant(w2, &[hidden, h]).unwrap(),
            b2: tape.zeros(&[h]),
        }
    }

    /// Constant-one metric: psi == 1 for every input.
    fn ones_metric(tape: &Tape<f64>, h: usize, hidden: usize) -> MetricNet<f64> {
        MetricNet {
            w1: tape.zeros(&[1, hidden]),
            b1: tape.zeros(&[hidden]),
            w2: tape.zeros(&[hidden, h]),
            b2: tape.ones(&[h]),
        }
    }

    fn full_pair_mask(tape: &Tape<f64>, b: usize, n: usize) -> Tensor<f64> {
        let mut m = vec![1.0; b * n * n];
        for bi in 0..b {
            for i in 0..n {
                m[bi * n * n + i * n + i] = 0.0;
            }
        }
        tape.constant(m, &[b, n, n]).unwrap()
    }

    #[test]
    fn identity_metric_gate_values() {
        // stubbed identity psi: gate(d) = ((1/d)^2)^2 = d^-4
        let tape: Tape<f64> = Tape::new();
        let h = 2;
        let net = identity_metric(&tape, h, 50);
        let n = 3;
        let d = tape
            .constant(
                vec![0.0, 1.0, 100.0, 1.0, 0.0, 1.0, 100.0, 1.0, 0.0],
                &[1, n, n],
            )
            .unwrap();
        let mask = full_pair_mask(&tape, 1, n);
        let g = metric_gate(&net, &d, &mask, h, MetricAct::Relu).unwrap();
        let v = g.values();
        // head 0, pair (0,1): d=1 -> gate 1
        assert!((v[1] - 1.0).abs() < 1e-15);
        // pair (0,2): d=100 -> gate (1e-4)^2 = 1e-8
        assert!((v[2] - 1e-8).abs() < 1e-22, "gate {}", v[2]);
        // diagonal forced to zero
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn gate_is_nonnegative_for_random_weights() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, h) = (4, 2);
        let blk = block(&tape, &mut rng, 8, h);
        let dvals: Vec<f64> = (0..n * n).map(|i| (i % n) as f64 + 0.5).collect();
        let d = tape.constant(dvals, &[1, n, n]).unwrap();
        let mask = full_pair_mask(&tape, 1, n);
        let g = metric_gate(blk.metric.as_ref().unwrap(), &d, &mask, h, MetricAct::Relu).unwrap();
        assert!(g.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn far_pair_gate_is_negligible() {
        // identity stub at d = 1e4: gate = 1e-16, vanishing vs bonded scales
        let tape: Tape<f64> = Tape::new();
        let net = identity_metric(&tape, 1, 50);
        let d = tape
            .constant(vec![0.0, 1.0e4, 1.0e4, 0.0], &[1, 2, 2])
            .unwrap();
        let mask = full_pair_mask(&tape, 1, 2);
        let g = metric_gate(&net, &d, &mask, 1, MetricAct::Relu).unwrap();
        let far = g.values()[1];
        assert!(far <= 1e-16 * (1.0 + 1e-9), "gate {far}");
        assert!(far > 0.0);
    }

    #[test]
    fn gated_with_unit_metric_equals_plain_attention() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, n, d, h) = (2, 4, 8, 2);
        let mut blk = block(&tape, &mut rng, d, h);
        blk.metric = Some(ones_metric(&tape, h, 50));
        let y = tape.constant(rand_vec(&mut rng, b * n * d), &[b, n, d]).unwrap();
        let dist_vals: Vec<f64> = (0..b * n * n).map(|i| ((i % 7) + 1) as f64).collect();
        let dist = tape.constant(dist_vals, &[b, n, n]).unwrap();
        let mask = full_pair_mask(&tape, b, n);

        let gated = AttendConfig {
            heads: h,
            variant: AttentionVariant::GatedLm,
            metric_act: MetricAct::Relu,
            omega: None,
        };
        let (out_gated, _) = attend(&blk, &y, &dist, &mask, &gated, false).unwrap();
        // plain masked attention: sum_in variant with a zero metric term
        let mut plain_blk = block(&tape, &mut rng, d, h);
        plain_blk.wq = blk.wq.clone();
        plain_blk.wk = blk.wk.clone();
        plain_blk.wv = blk.wv.clone();
        plain_blk.wo = blk.wo.clone();
        plain_blk.metric = Some(MetricNet {
            w1: tape.zeros(&[1, 50]),
            b1: tape.zeros(&[50]),
            w2: tape.zeros(&[50, h]),
            b2: tape.zeros(&[h]),
        });
        let plain = AttendConfig {
            heads: h,
            variant: AttentionVariant::SumIn,
            metric_act: MetricAct::Relu,
            omega: None,
        };
        let (out_plain, _) = attend(&plain_blk, &y, &dist, &mask, &plain, false).unwrap();
        for (a, b) in out_gated.values().iter().zip(out_plain.values()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_atom_attention_output_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, n, d, h) = (1, 1, 4, 2);
        let blk = block(&tape, &mut rng, d, h);
        let y = tape.constant(rand_vec(&mut rng, b * n * d), &[b, n, d]).unwrap();
        let dist = tape.zeros(&[b, n, n]);
        let mask = tape.zeros(&[b, n, n]); // diagonal-only molecule: all masked
        let cfg = AttendConfig {
            heads: h,
            variant: AttentionVariant::GatedLm,
            metric_act: MetricAct::Relu,
            omega: None,
        };
        let (out, _) = attend(&blk, &y, &dist, &mask, &cfg, false).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mat_exp_without_omega_is_a_config_error() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, n, d, h) = (1, 2, 4, 2);
        let blk = block(&tape, &mut rng, d, h);
        let y = tape.constant(rand_vec(&mut rng, b * n * d), &[b, n, d]).unwrap();
        let dist = tape.ones(&[b, n, n]);
        let mask = full_pair_mask(&tape, b, n);
        let cfg = AttendConfig {
            heads: h,
            variant: AttentionVariant::MatExp,
            metric_act: MetricAct::Relu,
            omega: None,
        };
        let err = attend(&blk, &y, &dist, &mask, &cfg, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn permutation_equivariance_all_variants() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, n, d, h) = (1, 5, 8, 2);
        let blk = block(&tape, &mut rng, d, h);
        let yv = rand_vec(&mut rng, b * n * d);
        // symmetric distances with zero diagonal
        let mut dv = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.5..4.0);
                dv[i * n + j] = v;
                dv[j * n + i] = v;
            }
        }
        let perm = [3usize, 0, 4, 1, 2];
        let mut yp = vec![0.0; yv.len()];
        let mut dp = vec![0.0; dv.len()];
        for i in 0..n {
            for c in 0..d {
                yp[i * d + c] = yv[perm[i] * d + c];
            }
            for j in 0..n {
                dp[i * n + j] = dv[perm[i] * n + perm[j]];
            }
        }
        for variant in [
            AttentionVariant::SumIn,
            AttentionVariant::MatExp,
            AttentionVariant::SumOutLm,
            AttentionVariant::GatedLm,
        ] {
            let cfg = AttendConfig {
                heads: h,
                variant,
                metric_act: MetricAct::Relu,
                omega: Some(1.0),
            };
            let mask = full_pair_mask(&tape, b, n);
            let y = tape.constant(yv.clone(), &[b, n, d]).unwrap();
            let dist = tape.constant(dv.clone(), &[b, n, n]).unwrap();
            let (out, _) = attend(&blk, &y, &dist, &mask, &cfg, false).unwrap();
            let y2 = tape.constant(yp.clone(), &[b, n, d]).unwrap();
            let dist2 = tape.constant(dp.clone(), &[b, n, n]).unwrap();
            let (out2, _) = attend(&blk, &y2, &dist2, &mask, &cfg, false).unwrap();
            let a = out.values();
            let bv = out2.values();
            for i in 0..n {
                for c in 0..d {
                    let diff = (bv[i * d + c] - a[perm[i] * d + c]).abs();
                    assert!(diff <= 1e-9, "variant {variant}: deviation {diff}");
                }
            }
        }
    }

    #[test]
    fn maps_post_equals_pre_times_gate_for_gated() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, n, d, h) = (1, 4, 8, 2);
        let blk = block(&tape, &mut rng, d, h);
        let y = tape.constant(rand_vec(&mut rng, b * n * d), &[b, n, d]).unwrap();
        let mut dv = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 1.0 + (i + j) as f64;
                dv[i * n + j] = v;
                dv[j * n + i] = v;
            }
        }
        let dist = tape.constant(dv, &[b, n, n]).unwrap();
        // mark atom 3 as padding
        let mut mv = vec![1.0; n * n];
        for i in 0..n {
            mv[i * n + i] = 0.0;
            mv[i * n + 3] = 0.0;
            mv[3 * n + i] = 0.0;
        }
        let mask = tape.constant(mv, &[b, n, n]).unwrap();
        let cfg = AttendConfig {
            heads: h,
            variant: AttentionVariant::GatedLm,
            metric_act: MetricAct::Relu,
            omega: None,
        };
        let (_, maps) = attend(&blk, &y, &dist, &mask, &cfg, true).unwrap();
        let maps = maps.unwrap();
        for i in 0..maps.post.len() {
            assert_eq!(maps.post[i], maps.pre[i] * maps.gate[i]);
        }
        // padded rows and columns all zero in every family
        let [bb, hh, nn, _] = maps.shape;
        for bi in 0..bb {
            for hi in 0..hh {
                for i in 0..nn {
                    let base = (bi * hh + hi) * nn * nn;
                    assert_eq!(maps.post[base + i * nn + 3], 0.0);
                    assert_eq!(maps.post[base + 3 * nn + i], 0.0);
                    assert_eq!(maps.pre[base + 3 * nn + i], 0.0);
                    assert_eq!(maps.gate[base + 3 * nn + i], 0.0);
                }
            }
        }
    }
}
