//! The full geometric transformer: positional encoding, M pre-LN encoder
//! blocks (distance-conditioned attention + GEGLU feed-forward), and a
//! per-atom linear head whose masked sum yields the molecule-level scalar.
//! Forces are the negative gradient of that scalar with respect to atom
//! positions, produced in differentiable mode so the force loss can train.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, AttendConfig, AttentionMaps, AttentionVariant, BlockAttention, MetricAct, MetricNet,
};
use crate::data::{Batch, DistanceMatrix};
use crate::error::{Error, Result};
use crate::pe::{encode_gpe, laplacian_eigenmaps, GpeNet};
use crate::tensor::{gather_rows, Elem, Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEncoder {
    Gpe,
    Laplacian,
    None,
}

impl fmt::Display for PosEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEncoder::Gpe => "gpe",
            PosEncoder::Laplacian => "laplacian",
            PosEncoder::None => "none",
        })
    }
}

impl FromStr for PosEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpe" => Ok(PosEncoder::Gpe),
            "laplacian" => Ok(PosEncoder::Laplacian),
            "none" => Ok(PosEncoder::None),
            other => Err(Error::Config(format!(
                "unknown positional encoder {other:?} (expected gpe | laplacian | none)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision {other:?} (expected f32 | f64)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub inner: usize,
    pub variant: AttentionVariant,
    pub metric_act: MetricAct,
    pub pos_encoder: PosEncoder,
    pub lap_k: usize,
    pub gpe_hidden: usize,
    pub metric_hidden: usize,
    pub vocab: usize,
    pub omega: Option<f64>,
    pub force_mode: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 10,
            dim: 512,
            heads: 8,
            inner: 2048,
            variant: AttentionVariant::GatedLm,
            metric_act: MetricAct::Relu,
            pos_encoder: PosEncoder::Gpe,
            lap_k: 15,
            gpe_hidden: 1024,
            metric_hidden: 50,
            vocab: 101,
            omega: Some(1.0),
            force_mode: false,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// Small configuration for verification work: 2 blocks, d = 16, 4 heads.
    pub fn desk() -> Self {
        ModelConfig {
            blocks: 2,
            dim: 16,
            heads: 4,
            inner: 32,
            gpe_hidden: 16,
            metric_hidden: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("model.blocks must be >= 1".to_string()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.inner == 0 || self.gpe_hidden == 0 || self.metric_hidden == 0 {
            return Err(Error::Config("hidden sizes must be >= 1".to_string()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary must cover padding + atoms".to_string()));
        }
        if self.variant == AttentionVariant::MatExp {
            match self.omega {
                Some(w) if w.is_finite() => {}
                _ => {
                    return Err(Error::Config(
                        "mat_exp attention requires a finite omega".to_string(),
                    ))
                }
            }
        }
        if self.force_mode && self.metric_act == MetricAct::Relu {
            return Err(Error::Config(
                "force mode requires the gelu metric activation: \
                 relu has a discontinuous second derivative"
                    .to_string(),
            ));
        }
        if self.force_mode && self.pos_encoder == PosEncoder::Laplacian {
            return Err(Error::Config(
                "force mode cannot use the laplacian encoder: eigenmap features \
                 do not differentiate through atom positions"
                    .to_string(),
            ));
        }
        if self.pos_encoder == PosEncoder::Laplacian && self.lap_k == 0 {
            return Err(Error::Config("model.lap_k must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Elem> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<E>,
}

/// All learnable parameters in a fixed, deterministic order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<E: Elem> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Elem> ParamSet<E> {
    pub fn from_entries(entries: Vec<ParamEntry<E>>) -> Self {
        ParamSet { entries }
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<E>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.values.iter().all(|v| v.is_finite()))
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut specs: Vec<(String, Vec<usize>)> =
        vec![("emb.table".to_string(), vec![cfg.vocab, d])];
    match cfg.pos_encoder {
        PosEncoder::Gpe => {
            specs.push(("gpe.w1".to_string(), vec![1, cfg.gpe_hidden]));
            specs.push(("gpe.b1".to_string(), vec![cfg.gpe_hidden]));
            specs.push(("gpe.w2".to_string(), vec![cfg.gpe_hidden, 1]));
            specs.push(("gpe.b2".to_string(), vec![1]));
            specs.push(("gpe.proj".to_string(), vec![d]));
        }
        PosEncoder::Laplacian => specs.push(("lap.proj".to_string(), vec![cfg.lap_k, d])),
        PosEncoder::None => {}
    }
    for m in 0..cfg.blocks {
        let p = |s: &str| format!("block{m}.{s}");
        specs.push((p("ln1.gain"), vec![d]));
        specs.push((p("ln1.bias"), vec![d]));
        specs.push((p("attn.wq"), vec![d, d]));
        specs.push((p("attn.wk"), vec![d, d]));
        specs.push((p("attn.wv"), vec![d, d]));
        specs.push((p("attn.wo"), vec![d, d]));
        if cfg.variant != AttentionVariant::MatExp {
            specs.push((p("metric.w1"), vec![1, cfg.metric_hidden]));
            specs.push((p("metric.b1"), vec![cfg.metric_hidden]));
            specs.push((p("metric.w2"), vec![cfg.metric_hidden, cfg.heads]));
            specs.push((p("metric.b2"), vec![cfg.heads]));
        }
        specs.push((p("ln2.gain"), vec![d]));
        specs.push((p("ln2.bias"), vec![d]));
        specs.push((p("ff.w1"), vec![d, 2 * cfg.inner]));
        specs.push((p("ff.b1"), vec![2 * cfg.inner]));
        specs.push((p("ff.w2"), vec![cfg.inner, d]));
        specs.push((p("ff.b2"), vec![d]));
    }
    specs.push(("head.ln.gain".to_string(), vec![d]));
    specs.push(("head.ln.bias".to_string(), vec![d]));
    specs.push(("head.w".to_string(), vec![d, 1]));
    specs.push(("head.b".to_string(), vec![1]));
    specs
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; deterministic given the stream
    loop {
        let u1: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

fn init_values<E: Elem>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<E> {
    let n: usize = shape.iter().product();
    if name == "emb.table" {
        let d = shape[1];
        let mut v: Vec<E> = (0..n)
            .map(|_| E::from_f64(0.02 * normal_sample(rng)))
            .collect();
        for x in v.iter_mut().take(d) {
            *x = E::zero(); // padding row
        }
        return v;
    }
    if name.ends_with(".gain") || name.ends_with("metric.b2") {
        return vec![E::one(); n];
    }
    if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b"
    {
        return vec![E::zero(); n];
    }
    if name.ends_with("metric.w2") {
        // keep the squared gate near one over bonded distances at step zero
        return (0..n)
            .map(|_| E::from_f64(rng.random_range(-0.01..0.01)))
            .collect();
    }
    // fan-in/fan-out scaled uniform for the remaining weight matrices
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (n, n),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Compute forces via a differentiable backward pass over positions.
    pub forces: bool,
    /// Capture per-block attention maps for inspection dumps.
    pub capture_maps: bool,
}

/// A forward (and optionally force) evaluation, alive on its own tape.
pub struct Evaluation<E: Elem> {
    pub tape: Tape<E>,
    /// Per-molecule scalar predictions, `[B]`.
    pub predictions: Tensor<E>,
    /// Negative position gradients, masked, `[B, N, 3]` (force mode only).
    pub forces: Option<Tensor<E>>,
    /// The positions leaf (force mode only).
    pub positions: Option<Tensor<E>>,
    pub maps: Option<Vec<AttentionMaps>>,
    leaves: Vec<Tensor<E>>,
}

impl<E: Elem> Evaluation<E> {
    /// Parameter leaves aligned with the model's `ParamSet` entries.
    pub fn param_leaves(&self) -> &[Tensor<E>] {
        &self.leaves
    }
}

pub struct Model<E: Elem> {
    pub config: ModelConfig,
    pub params: ParamSet<E>,
}

struct Bound<E: Elem> {
    leaves: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Bound<E> {
    fn get(&self, name: &str) -> &Tensor<E> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from schema"));
        &self.leaves[i]
    }
}

impl<E: Elem> Model<E> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let values = init_values::<E>(&name, &shape, &mut rng);
                ParamEntry {
                    name,
                    shape,
                    values,
                }
            })
            .collect();
        Ok(Model {
            config,
            params: ParamSet { entries },
        })
    }

    /// Rebuild from checkpointed parameters; shapes must match the schema.
    pub fn from_parts(config: ModelConfig, params: ParamSet<E>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, schema expects {}",
                params.len(),
                specs.len()
            )));
        }
        for ((name, shape), entry) in specs.iter().zip(params.entries()) {
            if name != &entry.name || shape != &entry.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match schema {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_values()
    }

    fn bind(&self, tape: &Tape<E>) -> Result<Bound<E>> {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for (i, e) in self.params.entries().iter().enumerate() {
            leaves.push(tape.leaf(e.values.clone(), &e.shape)?);
            index.insert(e.name.clone(), i);
        }
        Ok(Bound { leaves, index })
    }

    fn block_attention(&self, bound: &Bound<E>, m: usize) -> BlockAttention<E> {
        let p = |s: &str| format!("block{m}.{s}");
        let metric = (self.config.variant != AttentionVariant::MatExp).then(|| MetricNet {
            w1: bound.get(&p("metric.w1")).clone(),
            b1: bound.get(&p("metric.b1")).clone(),
            w2: bound.get(&p("metric.w2")).clone(),
            b2: bound.get(&p("metric.b2")).clone(),
        });
        BlockAttention {
            wq: bound.get(&p("attn.wq")).clone(),
            wk: bound.get(&p("attn.wk")).clone(),
            wv: bound.get(&p("attn.wv")).clone(),
            wo: bound.get(&p("attn.wo")).clone(),
            metric,
        }
    }

    pub fn evaluate(&self, batch: &Batch, opts: EvalOptions) -> Result<Evaluation<E>> {
        self.config.validate()?;
        if opts.forces && !self.config.force_mode {
            return Err(Error::Config(
                "force prediction requires a force-mode model".to_string(),
            ));
        }
        if opts.forces && batch.positions.is_none() {
            return Err(Error::Contract(
                "force prediction needs positions retained in the batch".to_string(),
            ));
        }

        let tape: Tape<E> = Tape::new();
        let bound = self.bind(&tape)?;
        let (b, n) = (batch.b, batch.n_max);

        let row_vals: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let row_mask = tape.constant_f64(&row_vals, &[b, n, 1])?;
        let mut pair_vals = vec![0.0f64; b * n * n];
        for bi in 0..b {
            for i in 0..n {
                if !batch.mask[bi * n + i] {
                    continue;
                }
                for j in 0..n {
                    if i != j && batch.mask[bi * n + j] {
                        pair_vals[bi * n * n + i * n + j] = 1.0;
                    }
                }
            }
        }
        let pair_mask = tape.constant_f64(&pair_vals, &[b, n, n])?;

        let positions = if self.config.force_mode && batch.positions.is_some() {
            let p = batch.positions.as_ref().unwrap();
            Some(tape.leaf(
                p.iter().map(|&v| E::from_f64(v)).collect(),
                &[b, n, 3],
            )?)
        } else {
            None
        };
        let dist = match &positions {
            Some(pos) => distances_on_tape(pos)?,
            None => tape.constant_f64(&batch.distances, &[b, n, n])?,
        };

        let emb = gather_rows(bound.get("emb.table"), &batch.atom_types, &[b, n])?;
        let mut y = match self.config.pos_encoder {
            PosEncoder::Gpe => {
                let net = GpeNet {
                    w1: bound.get("gpe.w1").clone(),
                    b1: bound.get("gpe.b1").clone(),
                    w2: bound.get("gpe.w2").clone(),
                    b2: bound.get("gpe.b2").clone(),
                    proj: bound.get("gpe.proj").clone(),
                };
                encode_gpe(&net, &emb, &dist, &pair_mask, &row_mask)?
            }
            PosEncoder::Laplacian => {
                let k = self.config.lap_k;
                let mut feats = vec![0.0f64; b * n * k];
                for bi in 0..b {
                    let n_real = batch.atom_count(bi);
                    let mut sub = vec![0.0f64; n_real * n_real];
                    for i in 0..n_real {
                        for j in 0..n_real {
                            sub[i * n_real + j] =
                                batch.distances[bi * n * n + i * n + j];
                        }
                    }
                    let dm = DistanceMatrix::from_values(n_real, sub)?;
                    let em = laplacian_eigenmaps(&dm, k);
                    for i in 0..n_real {
                        for c in 0..k {
                            feats[bi * n * k + i * k + c] = em[i * k + c];
                        }
                    }
                }
                let f = tape.constant_f64(&feats, &[b, n, k])?;
                let projected = f.matmul(bound.get("lap.proj"))?;
                emb.add(&projected)?
                    .mul(&row_mask.broadcast_to(&[b, n, self.config.dim])?)?
            }
            PosEncoder::None => {
                emb.mul(&row_mask.broadcast_to(&[b, n, self.config.dim])?)?
            }
        };

        let attend_cfg = AttendConfig {
            heads: self.config.heads,
            variant: self.config.variant,
            metric_act: self.config.metric_act,
            omega: self.config.omega,
        };
        let mut maps_out = opts.capture_maps.then(Vec::new);
        let inner2 = 2 * self.config.inner;
        for m in 0..self.config.blocks {
            let p = |s: &str| format!("block{m}.{s}");
            let ln1 = y.layer_norm(bound.get(&p("ln1.gain")), bound.get(&p("ln1.bias")), LN_EPS)?;
            let blk = self.block_attention(&bound, m);
            let (a, maps) = attend(&blk, &ln1, &dist, &pair_mask, &attend_cfg, opts.capture_maps)?;
            y = y.add(&a)?;
            let ln2 = y.layer_norm(bound.get(&p("ln2.gain")), bound.get(&p("ln2.bias")), LN_EPS)?;
            let h = ln2
                .matmul(bound.get(&p("ff.w1")))?
                .add(&bound.get(&p("ff.b1")).broadcast_to(&[b, n, inner2])?)?
                .geglu()?
                .matmul(bound.get(&p("ff.w2")))?
                .add(&bound.get(&p("ff.b2")).broadcast_to(&[b, n, self.config.dim])?)?;
            y = y.add(&h)?;
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation in block {m}"
                )));
            }
            if let (Some(list), Some(maps)) = (&mut maps_out, maps) {
                list.push(maps);
            }
        }

        let lnf = y.layer_norm(bound.get("head.ln.gain"), bound.get("head.ln.bias"), LN_EPS)?;
        let contrib = lnf
            .matmul(bound.get("head.w"))?
            .add(&bound.get("head.b").broadcast_to(&[b, n, 1])?)?
            .reshape(&[b, n])?
            .mul(&row_mask.reshape(&[b, n])?)?;
        let predictions = contrib.sum_axis(1)?;
        if !predictions.is_finite() {
            return Err(Error::Numeric("non-finite prediction".to_string()));
        }

        let forces = if opts.forces {
            let pos = positions.as_ref().expect("checked above");
            let total = predictions.sum_all()?;
            let grads = tape.backward_wrt(&total, &[pos])?;
            let g = grads.get(pos).expect("gradient for requested leaf");
            let mask3 = row_mask.broadcast_to(&[b, n, 3])?;
            Some(g.neg().mul(&mask3)?)
        } else {
            None
        };

        Ok(Evaluation {
            tape,
            predictions,
            forces,
            positions,
            maps: maps_out,
            leaves: bound.leaves,
        })
    }

    /// Convenience: per-molecule predictions as f64.
    pub fn predict_f64(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self
            .evaluate(batch, EvalOptions::default())?
            .predictions
            .values_f64())
    }

    /// Replace every block's metric net with an exact pass-through of its
    /// input (psi(x) = x). Diagnostic stub for gating-contract checks; only
    /// exact under the relu activation.
    pub fn set_metric_identity_stub(&mut self) {
        self.set_metric_stub(|w1, _b1, w2, _b2, heads| {
            w1[0] = E::one();
            for h in 0..heads {
                w2[h] = E::one();
            }
        });
    }

    /// Replace every block's metric net with the constant map psi == 1.
    pub fn set_metric_unit_stub(&mut self) {
        self.set_metric_stub(|_w1, _b1, _w2, b2, heads| {
            for h in 0..heads {
                b2[h] = E::one();
            }
        });
    }

    fn set_metric_stub(
        &mut self,
        fill: impl Fn(&mut [E], &mut [E], &mut [E], &mut [E], usize),
    ) {
        let heads = self.config.heads;
        for m in 0..self.config.blocks {
            let p = |s: &str| format!("block{m}.metric.{s}");
            let mut parts: Vec<Vec<E>> = ["w1", "b1", "w2", "b2"]
                .iter()
                .map(|s| {
                    let e = self.params.get(&p(s)).expect("metric params present");
                    vec![E::zero(); e.values.len()]
                })
                .collect();
            let (w1, rest) = parts.split_at_mut(1);
            let (b1, rest) = rest.split_at_mut(1);
            let (w2, b2) = rest.split_at_mut(1);
            fill(&mut w1[0], &mut b1[0], &mut w2[0], &mut b2[0], heads);
            for (s, vals) in ["w1", "b1", "w2", "b2"].iter().zip(parts) {
                self.params.get_mut(&p(s)).expect("metric params").values = vals;
            }
        }
    }
}

/// On-tape pairwise distances from a positions leaf `[B, N, 3]`. The
/// diagonal is exactly zero; its gradient is guarded to zero, which is
/// correct because every diagonal path is masked downstream.
pub fn distances_on_tape<E: Elem>(positions: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = positions.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(
            "distances_on_tape",
            format!("expected [B, N, 3], got {shape:?}"),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let xi = positions
        .reshape(&[b, n, 1, 3])?
        .broadcast_to(&[b, n, n, 3])?;
    let xj = positions
        .reshape(&[b, 1, n, 3])?
        .broadcast_to(&[b, n, n, 3])?;
    Ok(xi.sub(&xj)?.square().sum_axis(3)?.sqrt())
}
