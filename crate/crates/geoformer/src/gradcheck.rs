//! Finite-difference gradient checking.
//!
//! The checks here are deliberately independent of the backward pass: they
//! evaluate a freshly rebuilt forward computation at perturbed inputs and
//! compare central differences against the analytic gradients. Used by the
//! test suites and by the `gradcheck` CLI command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::MetricAct;
use crate::data::{make_batch, Batch};
use crate::error::Result;
use crate::model::{EvalOptions, Model, ModelConfig};
use crate::synth;
use crate::tensor::{concat, gather_rows, Tape, Tensor};
use crate::train::{batch_loss, TargetTransform};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub group: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

/// Worst relative deviation between two gradient vectors, normalized by the
/// largest entry magnitude so that near-zero components do not dominate.
pub fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central-difference gradient of a scalar function of flat inputs.
pub fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; inputs[which].len()];
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for i in 0..grad.len() {
        let orig = work[which][i];
        work[which][i] = orig + h;
        let up = f(&work);
        work[which][i] = orig - h;
        let down = f(&work);
        work[which][i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// A differentiable scalar functional of several tensor inputs, rebuildable
/// on a fresh tape for finite differencing.
type Builder = dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

fn check_builder(
    group: &str,
    tol: f64,
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    build: &Builder,
) -> GradReport {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape: Tape<f64> = Tape::new();
        let leaves: Vec<Tensor<f64>> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| tape.leaf(v.clone(), s).expect("gradcheck leaf"))
            .collect();
        build(&tape, &leaves)
            .expect("gradcheck build")
            .item()
            .expect("gradcheck scalar")
    };

    // analytic gradients from one backward pass
    let tape: Tape<f64> = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| tape.leaf(v.clone(), s).expect("gradcheck leaf"))
        .collect();
    let scalar = build(&tape, &leaves).expect("gradcheck build");
    let grads = tape.backward(&scalar).expect("gradcheck backward");

    let mut worst = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).expect("gradient present").values_f64();
        let numeric = fd_grad(&eval, inputs, which, FD_STEP);
        worst = worst.max(vec_rel_err(&analytic, &numeric));
    }
    GradReport {
        group: group.to_string(),
        max_rel_err: worst,
        tol,
    }
}

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (for |x|, relu, sign kinks).
fn rand_vals_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.2);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Gradient checks for every differentiable primitive on random shapes.
pub fn check_primitives(tol: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0f);
    let mut reports = Vec::new();

    // weights used to contract op outputs to a scalar
    let contract = |t: &Tensor<f64>, w: &[f64]| -> Result<Tensor<f64>> {
        let wt = t.tape().constant(w.to_vec(), t.shape())?;
        t.mul(&wt)?.sum_all()
    };

    {
        let (m, k, n) = (3, 4, 2);
        let w = rand_vals(&mut rng, m * n, -1.0, 1.0);
        let a = rand_vals(&mut rng, m * k, -1.0, 1.0);
        let b = rand_vals(&mut rng, k * n, -1.0, 1.0);
        reports.push(check_builder(
            "matmul 2d",
            tol,
            &[vec![m, k], vec![k, n]],
            &[a, b],
            &move |_, xs| contract(&xs[0].matmul(&xs[1])?, &w),
        ));
    }
    {
        let (b, m, k, n) = (2, 3, 4, 2);
        let w = rand_vals(&mut rng, b * m * n, -1.0, 1.0);
        let a = rand_vals(&mut rng, b * m * k, -1.0, 1.0);
        let wt = rand_vals(&mut rng, k * n, -1.0, 1.0);
        reports.push(check_builder(
            "matmul shared-right",
            tol,
            &[vec![b, m, k], vec![k, n]],
            &[a, wt],
            &move |_, xs| contract(&xs[0].matmul(&xs[1])?, &w),
        ));
    }
    {
        let (b, m, k, n) = (2, 2, 3, 2);
        let w = rand_vals(&mut rng, b * m * n, -1.0, 1.0);
        let a = rand_vals(&mut rng, b * m * k, -1.0, 1.0);
        let bb = rand_vals(&mut rng, b * k * n, -1.0, 1.0);
        reports.push(check_builder(
            "matmul batched",
            tol,
            &[vec![b, m, k], vec![b, k, n]],
            &[a, bb],
            &move |_, xs| contract(&xs[0].matmul(&xs[1])?, &w),
        ));
    }
    {
        let (rows, n) = (3, 5);
        let w = rand_vals(&mut rng, rows * n, -1.0, 1.0);
        let logits = rand_vals(&mut rng, rows * n, -2.0, 2.0);
        // one fully masked row, others partially masked
        let mut mask = vec![1.0; rows * n];
        mask[n] = 0.0;
        mask[n + 3] = 0.0;
        for v in mask.iter_mut().take(n) {
            *v = 0.0;
        }
        reports.push(check_builder(
            "masked_softmax",
            tol,
            &[vec![rows, n]],
            &[logits],
            &move |tape, xs| {
                let m = tape.constant(mask.clone(), &[rows, n])?;
                contract(&xs[0].masked_softmax(&m)?, &w)
            },
        ));
    }
    {
        let (rows, d) = (3, 4);
        let w = rand_vals(&mut rng, rows * d, -1.0, 1.0);
        let x = rand_vals(&mut rng, rows * d, -1.5, 1.5);
        let gain = rand_vals(&mut rng, d, 0.5, 1.5);
        let bias = rand_vals(&mut rng, d, -0.5, 0.5);
        reports.push(check_builder(
            "layer_norm",
            tol,
            &[vec![rows, d], vec![d], vec![d]],
            &[x, gain, bias],
            &move |_, xs| contract(&xs[0].layer_norm(&xs[1], &xs[2], 1e-5)?, &w),
        ));
    }
    for (name, f) in [
        ("gelu", (|t: &Tensor<f64>| Ok(t.gelu())) as fn(&Tensor<f64>) -> Result<Tensor<f64>>),
        ("erf", |t| Ok(t.erf())),
        ("exp", |t| Ok(t.exp())),
        ("square", |t| Ok(t.square())),
        ("neg", |t| Ok(t.neg())),
        ("scale", |t| Ok(t.scale(-1.7))),
        ("add_scalar", |t| Ok(t.add_scalar(0.3))),
    ] {
        let n = 6;
        let w = rand_vals(&mut rng, n, -1.0, 1.0);
        let x = rand_vals(&mut rng, n, -1.5, 1.5);
        reports.push(check_builder(
            name,
            tol,
            &[vec![n]],
            &[x],
            &move |_, xs| contract(&f(&xs[0])?, &w),
        ));
    }
    for (name, f) in [
        ("relu", (|t: &Tensor<f64>| Ok(t.relu())) as fn(&Tensor<f64>) -> Result<Tensor<f64>>),
        ("abs", |t| Ok(t.abs())),
    ] {
        let n = 6;
        let w = rand_vals(&mut rng, n, -1.0, 1.0);
        let x = rand_vals_off_zero(&mut rng, n);
        reports.push(check_builder(
            name,
            tol,
            &[vec![n]],
            &[x],
            &move |_, xs| contract(&f(&xs[0])?, &w),
        ));
    }
    for (name, lo, hi, f) in [
        (
            "sqrt",
            0.3,
            2.0,
            (|t: &Tensor<f64>| Ok(t.sqrt())) as fn(&Tensor<f64>) -> Result<Tensor<f64>>,
        ),
        ("recip_guard", 0.4, 2.0, |t| Ok(t.recip_guard())),
    ] {
        let n = 6;
        let w = rand_vals(&mut rng, n, -1.0, 1.0);
        let x = rand_vals(&mut rng, n, lo, hi);
        reports.push(check_builder(
            name,
            tol,
            &[vec![n]],
            &[x],
            &move |_, xs| contract(&f(&xs[0])?, &w),
        ));
    }
    {
        let n = 8;
        let w = rand_vals(&mut rng, n / 2, -1.0, 1.0);
        let x = rand_vals(&mut rng, n, -1.5, 1.5);
        reports.push(check_builder(
            "geglu",
            tol,
            &[vec![1, n]],
            &[x],
            &move |_, xs| contract(&xs[0].geglu()?.reshape(&[n / 2])?, &w),
        ));
    }
    for (name, f) in [
        (
            "add",
            (|a: &Tensor<f64>, b: &Tensor<f64>| a.add(b))
                as fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
        ),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
    ] {
        let n = 5;
        let w = rand_vals(&mut rng, n, -1.0, 1.0);
        let a = rand_vals(&mut rng, n, -1.5, 1.5);
        let b = rand_vals(&mut rng, n, -1.5, 1.5);
        reports.push(check_builder(
            name,
            tol,
            &[vec![n], vec![n]],
            &[a, b],
            &move |_, xs| contract(&f(&xs[0], &xs[1])?, &w),
        ));
    }
    {
        let w = rand_vals(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        let x = rand_vals(&mut rng, 3, -1.5, 1.5);
        reports.push(check_builder(
            "broadcast_to",
            tol,
            &[vec![3, 1]],
            &[x],
            &move |_, xs| contract(&xs[0].broadcast_to(&[2, 3, 4])?, &w),
        ));
    }
    {
        let w = rand_vals(&mut rng, 2 * 4, -1.0, 1.0);
        let x = rand_vals(&mut rng, 2 * 3 * 4, -1.5, 1.5);
        reports.push(check_builder(
            "sum_axis",
            tol,
            &[vec![2, 3, 4]],
            &[x.clone()],
            &move |_, xs| contract(&xs[0].sum_axis(1)?, &w),
        ));
        let w2 = rand_vals(&mut rng, 3 * 4, -1.0, 1.0);
        reports.push(check_builder(
            "mean_axis",
            tol,
            &[vec![2, 3, 4]],
            &[x],
            &move |_, xs| contract(&xs[0].mean_axis(0)?, &w2),
        ));
    }
    {
        let w = rand_vals(&mut rng, 2 * 2, -1.0, 1.0);
        let x = rand_vals(&mut rng, 2 * 5, -1.5, 1.5);
        reports.push(check_builder(
            "slice_axis",
            tol,
            &[vec![2, 5]],
            &[x],
            &move |_, xs| contract(&xs[0].slice_axis(1, 2, 2)?, &w),
        ));
    }
    {
        let w = rand_vals(&mut rng, 5 * 2, -1.0, 1.0);
        let a = rand_vals(&mut rng, 3 * 2, -1.5, 1.5);
        let b = rand_vals(&mut rng, 2 * 2, -1.5, 1.5);
        reports.push(check_builder(
            "concat",
            tol,
            &[vec![3, 2], vec![2, 2]],
            &[a, b],
            &move |_, xs| contract(&concat(&[&xs[0], &xs[1]], 0)?, &w),
        ));
    }
    {
        let w = rand_vals(&mut rng, 24, -1.0, 1.0);
        let x = rand_vals(&mut rng, 24, -1.5, 1.5);
        reports.push(check_builder(
            "permute",
            tol,
            &[vec![2, 3, 4]],
            &[x.clone()],
            &move |_, xs| contract(&xs[0].permute(&[2, 0, 1])?, &w),
        ));
        let w2 = rand_vals(&mut rng, 24, -1.0, 1.0);
        reports.push(check_builder(
            "reshape",
            tol,
            &[vec![2, 3, 4]],
            &[x],
            &move |_, xs| contract(&xs[0].reshape(&[6, 4])?, &w2),
        ));
    }
    {
        let (vocab, d) = (5, 3);
        let ids = vec![2usize, 0, 2, 4];
        let w = rand_vals(&mut rng, ids.len() * d, -1.0, 1.0);
        let table = rand_vals(&mut rng, vocab * d, -1.0, 1.0);
        let ids_c = ids.clone();
        reports.push(check_builder(
            "embedding_lookup",
            tol,
            &[vec![vocab, d]],
            &[table],
            &move |_, xs| contract(&gather_rows(&xs[0], &ids_c, &[ids_c.len()])?, &w),
        ));
    }

    reports
}

/// Second-order checks: the backward pass replayed as a differentiable
/// computation must match finite differences of first derivatives.
pub fn check_nested(tol: f64) -> Vec<GradReport> {
    let mut reports = Vec::new();

    // d2/dx2 gelu at 0.5 against a second-order central difference
    {
        let x0 = 0.5f64;
        let analytic = {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(vec![x0], &[]).unwrap();
            let y = x.gelu();
            let g1 = tape.backward_wrt(&y, &[&x]).unwrap();
            let dy = g1.get(&x).unwrap();
            let g2 = tape.backward_wrt(&dy, &[&x]).unwrap();
            g2.get(&x).unwrap().item().unwrap()
        };
        let f = |v: f64| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(vec![v], &[]).unwrap();
            x.gelu().item().unwrap()
        };
        let h = 1e-4;
        let numeric = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h);
        reports.push(GradReport {
            group: "gelu second derivative".to_string(),
            max_rel_err: vec_rel_err(&[analytic], &[numeric]),
            tol,
        });
    }

    // mixed second derivative of a composite: f(x, th) = sum(gelu(th*x)^2);
    // nested backward d/dth (df/dx) vs finite differences of df/dx over th
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x2e57);
        let n = 4;
        let xv = rand_vals(&mut rng, n, -1.2, 1.2);
        let tv = rand_vals(&mut rng, n, 0.4, 1.4);

        let first_grad = |xv: &[f64], tv: &[f64]| -> Vec<f64> {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(xv.to_vec(), &[n]).unwrap();
            let th = tape.leaf(tv.to_vec(), &[n]).unwrap();
            let f = th.mul(&x).unwrap().gelu().square().sum_all().unwrap();
            let g = tape.backward_wrt(&f, &[&x]).unwrap();
            g.get(&x).unwrap().values_f64()
        };

        // analytic: backward through the first backward
        let analytic = {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(xv.clone(), &[n]).unwrap();
            let th = tape.leaf(tv.clone(), &[n]).unwrap();
            let f = th.mul(&x).unwrap().gelu().square().sum_all().unwrap();
            let g = tape.backward_wrt(&f, &[&x]).unwrap();
            let gx = g.get(&x).unwrap();
            let probe = tape.constant(vec![0.7, -0.3, 0.5, 0.9], &[n]).unwrap();
            let s = gx.mul(&probe).unwrap().sum_all().unwrap();
            let g2 = tape.backward_wrt(&s, &[&th]).unwrap();
            g2.get(&th).unwrap().values_f64()
        };

        let probe = [0.7, -0.3, 0.5, 0.9];
        let mut numeric = vec![0.0; n];
        let h = FD_STEP;
        for i in 0..n {
            let mut up = tv.clone();
            up[i] += h;
            let mut down = tv.clone();
            down[i] -= h;
            let gu = first_grad(&xv, &up);
            let gd = first_grad(&xv, &down);
            numeric[i] = gu
                .iter()
                .zip(&gd)
                .zip(&probe)
                .map(|((u, d), p)| p * (u - d) / (2.0 * h))
                .sum();
        }
        reports.push(GradReport {
            group: "nested mixed derivative".to_string(),
            max_rel_err: vec_rel_err(&analytic, &numeric),
            tol,
        });
    }

    reports
}

/// Deterministic sample of (parameter entry, flat index) coordinates.
fn sample_coordinates<E: crate::tensor::Elem>(
    model: &Model<E>,
    count: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = model.params.entries();
    (0..count)
        .map(|_| {
            let e = rng.random_range(0..entries.len());
            let i = rng.random_range(0..entries[e].values.len());
            (e, i)
        })
        .collect()
}

fn fd_over_params(
    model: &Model<f64>,
    coords: &[(usize, usize)],
    scalar_of: &dyn Fn(&Model<f64>) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len());
    let mut work = Model {
        config: model.config.clone(),
        params: model.params.clone(),
    };
    for &(e, i) in coords {
        let orig = work.params.entries()[e].values[i];
        work.params.entries_mut()[e].values[i] = orig + FD_STEP;
        let up = scalar_of(&work);
        work.params.entries_mut()[e].values[i] = orig - FD_STEP;
        let down = scalar_of(&work);
        work.params.entries_mut()[e].values[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

fn synthetic_batch(with_positions: bool, seed: u64) -> Batch {
    let mols = synth::dataset(2, seed, 3, 4);
    let refs: Vec<&crate::data::Molecule> = mols.iter().collect();
    make_batch(&refs, synth::TARGET, with_positions).expect("synthetic batch")
}

/// Parameter gradients of the composed forward model (probe-weighted sum of
/// predictions) against finite differences over sampled coordinates.
pub fn check_model(tol: f64) -> Result<GradReport> {
    let cfg = ModelConfig::desk();
    let model: Model<f64> = Model::init(cfg, 0xA11C)?;
    let batch = synthetic_batch(false, 0xB0B);
    let probe = [0.8, -0.6];

    let scalar_of = |m: &Model<f64>| -> f64 {
        let preds = m.predict_f64(&batch).expect("forward");
        preds.iter().zip(probe).map(|(p, w)| p * w).sum()
    };

    let eval = model.evaluate(&batch, EvalOptions::default())?;
    let probe_t = eval.tape.constant_f64(&probe, &[2])?;
    let scalar = eval.predictions.mul(&probe_t)?.sum_all()?;
    let leaves: Vec<&Tensor<f64>> = eval.param_leaves().iter().collect();
    let grads = eval.tape.backward_wrt(&scalar, &leaves)?;

    let coords = sample_coordinates(&model, 24, 0xC0C);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(e, i)| {
            grads
                .get(&eval.param_leaves()[e])
                .expect("requested leaf")
                .values_f64()[i]
        })
        .collect();
    let numeric = fd_over_params(&model, &coords, &scalar_of);
    Ok(GradReport {
        group: "model parameters".to_string(),
        max_rel_err: vec_rel_err(&analytic, &numeric),
        tol,
    })
}

/// Parameter gradients of the force-matching loss — which contains a full
/// backward pass over positions — against finite differences.
pub fn check_force_loss(tol: f64) -> Result<GradReport> {
    let mut cfg = ModelConfig::desk();
    cfg.force_mode = true;
    cfg.metric_act = MetricAct::Gelu;
    let model: Model<f64> = Model::init(cfg, 0xF0F)?;
    let batch = synthetic_batch(true, 0xD0D);
    let rho = 1e3;

    let scalar_of = |m: &Model<f64>| -> f64 {
        let bl = batch_loss(m, &batch, TargetTransform::identity(), rho).expect("loss");
        bl.loss.item().expect("scalar")
    };

    let bl = batch_loss(&model, &batch, TargetTransform::identity(), rho)?;
    let leaves: Vec<&Tensor<f64>> = bl.eval.param_leaves().iter().collect();
    let grads = bl.eval.tape.backward_wrt(&bl.loss, &leaves)?;

    let coords = sample_coordinates(&model, 24, 0xE0E);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(e, i)| {
            grads
                .get(&bl.eval.param_leaves()[e])
                .expect("requested leaf")
                .values_f64()[i]
        })
        .collect();
    let numeric = fd_over_params(&model, &coords, &scalar_of);
    Ok(GradReport {
        group: "force loss parameters".to_string(),
        max_rel_err: vec_rel_err(&analytic, &numeric),
        tol,
    })
}

/// Force vectors against central finite differences of the forward scalar
/// over every atom coordinate.
pub fn check_forces(tol: f64) -> Result<GradReport> {
    let mut cfg = ModelConfig::desk();
    cfg.force_mode = true;
    cfg.metric_act = MetricAct::Gelu;
    let model: Model<f64> = Model::init(cfg, 0xFA)?;
    let mols = synth::dataset(1, 0xAB, 4, 4);
    let refs: Vec<&crate::data::Molecule> = mols.iter().collect();
    let batch = make_batch(&refs, synth::TARGET, true)?;

    let eval = model.evaluate(
        &batch,
        EvalOptions {
            forces: true,
            capture_maps: false,
        },
    )?;
    let analytic = eval.forces.expect("forces requested").values_f64();

    let n = batch.n_max;
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..n {
        for k in 0..3 {
            let eval_at = |delta: f64| -> f64 {
                let mut b = batch.clone();
                let p = b.positions.as_mut().unwrap();
                p[(i * 3) + k] += delta;
                // rebuild distances from moved positions (f64 path)
                let mut pos = vec![[0.0f64; 3]; n];
                for a in 0..n {
                    for c in 0..3 {
                        pos[a][c] = p[a * 3 + c];
                    }
                }
                let d = crate::data::pairwise_distances(&pos).expect("positions");
                b.distances.copy_from_slice(d.values());
                model.predict_f64(&b).expect("forward")[0]
            };
            let up = eval_at(FD_STEP);
            let down = eval_at(-FD_STEP);
            numeric[i * 3 + k] = -(up - down) / (2.0 * FD_STEP);
        }
    }
    Ok(GradReport {
        group: "forces vs coordinate differences".to_string(),
        max_rel_err: vec_rel_err(&analytic, &numeric),
        tol,
    })
}

/// The complete suite, as run by the `gradcheck` command: primitives at
/// 1e-6, nested second derivatives at 1e-4, composed model at 1e-5, forces
/// at 1e-5, force-loss parameters at 1e-4.
pub fn full_suite() -> Result<Vec<GradReport>> {
    let mut reports = check_primitives(1e-6);
    reports.extend(check_nested(1e-4));
    reports.push(check_model(1e-5)?);
    reports.push(check_forces(1e-5)?);
    reports.push(check_force_loss(1e-4)?);
    Ok(reports)
}
