//! The training procedure: shuffled epochs with optional half-batch mixup,
//! L1 (or force-matching) objective, Adam, plateau learning-rate decay,
//! per-epoch metrics and best/last checkpoints. Everything is deterministic
//! given the seed: per-purpose random streams are derived from
//! (seed, purpose, epoch, batch) so batch preparation could be pipelined
//! without changing results.

mod adam;
mod loss;
mod metrics;
mod scheduler;

pub use adam::AdamState;
pub use loss::{force_loss, l1_loss};
pub use metrics::{MetricsLog, MetricsRow, METRICS_HEADER};
pub use scheduler::PlateauScheduler;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_half_batch, mix, MixConfig};
use crate::checkpoint::save_checkpoint_with_transform;
use crate::config::RunConfig;
use crate::data::{make_batch, Batch, Molecule, Split};
use crate::error::{Error, Result};
use crate::model::{EvalOptions, Evaluation, Model};
use crate::tensor::{Elem, Tensor};

pub const CKPT_BEST: &str = "ckpt_best";
pub const CKPT_LAST: &str = "ckpt_last";
pub const METRICS_FILE: &str = "metrics.csv";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for (seed, purpose, epoch, batch...).
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Affine target map applied before training: (raw - mean) / std.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetTransform {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetTransform {
    fn default() -> Self {
        TargetTransform {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl TargetTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        TargetTransform {
            mean,
            std: var.sqrt().max(1e-12),
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    pub fn invert(&self, model_units: f64) -> f64 {
        model_units * self.std + self.mean
    }
}

/// One batch's objective, still on the evaluation tape.
pub struct BatchLoss<E: Elem> {
    pub eval: Evaluation<E>,
    pub loss: Tensor<E>,
    /// Per-item |prediction - target| in model (transformed) units.
    pub abs_errors: Vec<f64>,
}

/// Forward pass plus objective for one batch. With a force-mode model, a
/// positive rho and reference forces present, the force term is included
/// (targets and forces consistently rescaled by the transform).
pub fn batch_loss<E: Elem>(
    model: &Model<E>,
    batch: &Batch,
    tf: TargetTransform,
    rho: f64,
) -> Result<BatchLoss<E>> {
    let with_forces = model.config.force_mode
        && rho > 0.0
        && batch.forces.is_some()
        && batch.positions.is_some();
    let eval = model.evaluate(
        batch,
        EvalOptions {
            forces: with_forces,
            capture_maps: false,
        },
    )?;
    let tape = eval.tape.clone();
    let targets_t: Vec<f64> = batch.targets.iter().map(|&t| tf.apply(t)).collect();
    let target = tape.constant_f64(&targets_t, &[batch.b])?;
    let loss = if with_forces {
        let (b, n) = (batch.b, batch.n_max);
        let mask3_vals: Vec<f64> = batch
            .mask
            .iter()
            .flat_map(|&m| {
                let v = if m { 1.0 } else { 0.0 };
                [v, v, v]
            })
            .collect();
        let mask3 = tape.constant_f64(&mask3_vals, &[b, n, 3])?;
        let f_ref: Vec<f64> = batch
            .forces
            .as_ref()
            .expect("checked above")
            .iter()
            .map(|&f| f / tf.std)
            .collect();
        let f_target = tape.constant_f64(&f_ref, &[b, n, 3])?;
        force_loss(
            &eval.predictions,
            &target,
            eval.forces.as_ref().expect("forces requested"),
            &f_target,
            &mask3,
            rho,
            batch.total_real_atoms(),
        )?
    } else {
        l1_loss(&eval.predictions, &target)?
    };
    let abs_errors: Vec<f64> = eval
        .predictions
        .values_f64()
        .iter()
        .zip(&targets_t)
        .map(|(p, t)| (p - t).abs())
        .collect();
    Ok(BatchLoss {
        eval,
        loss,
        abs_errors,
    })
}

/// MAE over a split in raw target units.
pub fn evaluate_split<E: Elem>(
    model: &Model<E>,
    molecules: &[Molecule],
    indices: &[usize],
    target: &str,
    batch_size: usize,
    tf: TargetTransform,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation over an empty split".to_string()));
    }
    let mut sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let refs: Vec<&Molecule> = chunk.iter().map(|&i| &molecules[i]).collect();
        let batch = make_batch(&refs, target, false)?;
        let preds = model.predict_f64(&batch)?;
        for (p, t) in preds.iter().zip(&batch.targets) {
            sum += (tf.invert(*p) - t).abs();
        }
    }
    Ok(sum / indices.len() as f64)
}

/// Mean |f(M_ij) - f(M_i) - f(M_j)| over fixed far-separated pairs, in raw
/// units. The mixing rotation per pair is fixed by the seed so the series
/// is comparable across epochs.
pub fn separability_gap<E: Elem>(
    model: &Model<E>,
    molecules: &[Molecule],
    pairs: &[(usize, usize)],
    target: &str,
    mix_cfg: &MixConfig,
    tf: TargetTransform,
    seed: u64,
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 3, idx as u64]));
        let mixed = mix(&molecules[i], &molecules[j], mix_cfg, target, &mut rng)?;
        let f = |m: &Molecule| -> Result<f64> {
            let batch = make_batch(&[m], target, false)?;
            Ok(tf.invert(model.predict_f64(&batch)?[0]))
        };
        let gap = (f(&mixed)? - f(&molecules[i])? - f(&molecules[j])?).abs();
        total += gap;
    }
    Ok(Some(total / pairs.len() as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub best_val: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub transform: TargetTransform,
}

/// Run the full training procedure. When `run_dir` is given, `metrics.csv`,
/// `ckpt_best` and `ckpt_last` are maintained there; on a numeric abort the
/// last good parameters are still written to `ckpt_last`.
pub fn train<E: Elem>(
    model: &mut Model<E>,
    molecules: &[Molecule],
    split: &Split,
    cfg: &RunConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let target = cfg.data.target.clone();
    let seed = cfg.data.seed;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".to_string()));
    }
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if molecules[i].property(&target).is_none() {
            return Err(Error::Data(format!(
                "molecule {i} is missing target property {target:?}"
            )));
        }
    }

    let tf = if cfg.train.standardize {
        let vals: Vec<f64> = split
            .train
            .iter()
            .map(|&i| molecules[i].property(&target).expect("checked above"))
            .collect();
        TargetTransform::fit(&vals)
    } else {
        TargetTransform::identity()
    };
    let mix_cfg = MixConfig { t: cfg.train.mix_t };
    if cfg.train.augment {
        mix_cfg.validate()?;
    }
    let rho = if model.config.force_mode { cfg.train.rho } else { 0.0 };

    let mut adam = AdamState::new(&model.params);
    let mut sched = PlateauScheduler::new(cfg.train.lr, cfg.train.patience, cfg.train.threshold);
    let mut log = MetricsLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut steps: u64 = 0;

    let sep_pairs: Vec<(usize, usize)> = split
        .val
        .chunks(2)
        .take(cfg.train.sep_pairs)
        .filter(|c| c.len() == 2)
        .map(|c| (c[0], c[1]))
        .collect();

    let write_artifacts = |model: &Model<E>,
                           log: &MetricsLog,
                           steps: u64,
                           best: bool|
     -> Result<()> {
        if let Some(dir) = run_dir {
            log.write(dir.join(METRICS_FILE))?;
            save_checkpoint_with_transform(
                dir.join(CKPT_LAST),
                model,
                steps,
                tf.mean,
                tf.std,
            )?;
            if best {
                save_checkpoint_with_transform(
                    dir.join(CKPT_BEST),
                    model,
                    steps,
                    tf.mean,
                    tf.std,
                )?;
            }
        }
        Ok(())
    };

    let mut out_of_steps = false;
    for epoch in 1..=cfg.train.epochs {
        if out_of_steps {
            break;
        }
        let t0 = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[
            seed,
            1,
            epoch as u64,
        ])));

        let mut err_sum = 0.0f64;
        let mut err_n = 0usize;
        let mut aug_sum = 0.0f64;
        let mut aug_n = 0usize;
        for (bidx, chunk) in order.chunks(cfg.train.batch).enumerate() {
            if let Some(ms) = cfg.train.max_steps {
                if steps >= ms as u64 {
                    out_of_steps = true;
                    break;
                }
            }
            let mut batch_mols: Vec<Molecule> =
                chunk.iter().map(|&i| molecules[i].clone()).collect();
            let mut mixed_from = batch_mols.len();
            let mut mixed_count = 0usize;
            if cfg.train.augment && batch_mols.len() >= 2 {
                let designated = batch_mols.len() / 2;
                mixed_from = batch_mols.len() - designated;
                mixed_count = designated / 2;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
                    seed,
                    2,
                    epoch as u64,
                    bidx as u64,
                ]));
                batch_mols = augment_half_batch(&batch_mols, &mix_cfg, &target, &mut rng)?;
            }
            let refs: Vec<&Molecule> = batch_mols.iter().collect();
            let batch = make_batch(&refs, &target, model.config.force_mode)?;

            let bl = batch_loss(model, &batch, tf, rho)?;
            let loss_val = bl.loss.item()?.as_f64();
            if !loss_val.is_finite() {
                write_artifacts(model, &log, steps, false)?;
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bidx}; last good checkpoint retained"
                )));
            }

            let leaves: Vec<&Tensor<E>> = bl.eval.param_leaves().iter().collect();
            let grads_map = bl.eval.tape.backward_wrt(&bl.loss, &leaves)?;
            let mut grads: Vec<Vec<E>> = leaves
                .iter()
                .map(|l| grads_map.get(l).expect("requested gradient").values())
                .collect();
            if let Some(clip) = cfg.train.clip {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let s = E::from_f64(clip / norm);
                    for g in &mut grads {
                        for v in g.iter_mut() {
                            *v = *v * s;
                        }
                    }
                }
            }
            if let Err(e) = adam.step(&mut model.params, &grads, sched.lr()) {
                write_artifacts(model, &log, steps, false)?;
                return Err(e);
            }
            steps += 1;

            for (i, ae) in bl.abs_errors.iter().enumerate() {
                let raw = ae * tf.std;
                if i >= mixed_from && i < mixed_from + mixed_count {
                    aug_sum += raw;
                    aug_n += 1;
                } else {
                    err_sum += raw;
                    err_n += 1;
                }
            }
        }

        let seconds = if cfg.train.wall_time {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.push(MetricsRow {
            epoch,
            split: "train".to_string(),
            mae: err_sum / err_n.max(1) as f64,
            aug_mae: (aug_n > 0).then(|| aug_sum / aug_n as f64),
            sep_gap: None,
            lr: sched.lr(),
            seconds,
        });

        if epoch % cfg.train.eval_every == 0 && !split.val.is_empty() {
            let tv = Instant::now();
            let val_mae =
                evaluate_split(model, molecules, &split.val, &target, cfg.train.batch, tf)?;
            let gap = separability_gap(
                model, molecules, &sep_pairs, &target, &mix_cfg, tf, seed,
            )?;
            let lr_after = sched.step(val_mae);
            let vsecs = if cfg.train.wall_time {
                tv.elapsed().as_secs_f64()
            } else {
                0.0
            };
            log.push(MetricsRow {
                epoch,
                split: "val".to_string(),
                mae: val_mae,
                aug_mae: None,
                sep_gap: gap,
                lr: lr_after,
                seconds: vsecs,
            });
            let is_best = val_mae < best_val;
            if is_best {
                best_val = val_mae;
                best_epoch = epoch;
            }
            write_artifacts(model, &log, steps, is_best)?;
        } else {
            write_artifacts(model, &log, steps, false)?;
        }
    }

    Ok(TrainOutcome {
        metrics: log,
        best_val,
        best_epoch,
        steps,
        transform: tf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RawConfig, RunConfig};
    use crate::model::Model;
    use crate::synth;

    fn desk_run_config(text: &str) -> RunConfig {
        let raw = RawConfig::parse(text, None).unwrap();
        RunConfig::from_raw(&raw).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_seed_deterministic() {
        let mols = synth::dataset(12, 77, 3, 5);
        let split = Split {
            train: (0..8).collect(),
            val: (8..12).collect(),
            test: vec![],
        };
        let cfg = desk_run_config(
            "model.blocks = 1\nmodel.d = 16\nmodel.heads = 4\nmodel.inner = 16\n\
             model.gpe_hidden = 8\nmodel.metric_hidden = 8\n\
             target = E\ntrain.batch = 4\ntrain.epochs = 8\ntrain.lr = 0.003\n\
             train.augment = false\ntrain.wall_time = false\nseed = 1\n",
        );
        let run = |seed: u64| {
            let mut model: Model<f64> = Model::init(cfg.model.clone(), seed).unwrap();
            let out = train(&mut model, &mols, &split, &cfg, None).unwrap();
            (out, model)
        };
        let (out1, m1) = run(5);
        let (out2, m2) = run(5);
        assert_eq!(out1.metrics.to_csv(), out2.metrics.to_csv());
        for (a, b) in m1.params.entries().iter().zip(m2.params.entries()) {
            assert_eq!(a.values, b.values);
        }
        let train_rows = out1.metrics.split_rows("train");
        let first = train_rows.first().unwrap().mae;
        let last = train_rows.last().unwrap().mae;
        assert!(last < first, "training did not reduce MAE: {first} -> {last}");
    }

    #[test]
    fn augmented_training_runs_and_reports_aug_mae() {
        let mols = synth::dataset(8, 3, 3, 4);
        let split = Split {
            train: (0..6).collect(),
            val: (6..8).collect(),
            test: vec![],
        };
        let cfg = desk_run_config(
            "model.blocks = 1\nmodel.d = 8\nmodel.heads = 2\nmodel.inner = 8\n\
             model.gpe_hidden = 4\nmodel.metric_hidden = 4\n\
             target = E\ntrain.batch = 4\ntrain.epochs = 2\ntrain.augment = true\n\
             train.wall_time = false\ntrain.sep_pairs = 1\nseed = 2\n",
        );
        let mut model: Model<f64> = Model::init(cfg.model.clone(), 1).unwrap();
        let out = train(&mut model, &mols, &split, &cfg, None).unwrap();
        let train_rows = out.metrics.split_rows("train");
        assert!(train_rows.iter().all(|r| r.aug_mae.is_some()));
        let val_rows = out.metrics.split_rows("val");
        assert!(val_rows.iter().all(|r| r.sep_gap.is_some()));
    }

    #[test]
    fn max_steps_caps_training() {
        let mols = synth::dataset(8, 4, 3, 4);
        let split = Split {
            train: (0..8).collect(),
            val: vec![],
            test: vec![],
        };
        let cfg = desk_run_config(
            "model.blocks = 1\nmodel.d = 8\nmodel.heads = 2\nmodel.inner = 8\n\
             model.gpe_hidden = 4\nmodel.metric_hidden = 4\n\
             target = E\ntrain.batch = 2\ntrain.epochs = 50\ntrain.max_steps = 5\n\
             train.augment = false\ntrain.wall_time = false\nseed = 2\n",
        );
        let mut model: Model<f64> = Model::init(cfg.model.clone(), 1).unwrap();
        let out = train(&mut model, &mols, &split, &cfg, None).unwrap();
        assert_eq!(out.steps, 5);
    }

    #[test]
    fn standardization_changes_model_units_but_not_reported_units() {
        let mols = synth::dataset(10, 6, 3, 4);
        let split = Split {
            train: (0..8).collect(),
            val: (8..10).collect(),
            test: vec![],
        };
        let base = "model.blocks = 1\nmodel.d = 8\nmodel.heads = 2\nmodel.inner = 8\n\
                    model.gpe_hidden = 4\nmodel.metric_hidden = 4\n\
                    target = E\ntrain.batch = 4\ntrain.epochs = 1\ntrain.augment = false\n\
                    train.wall_time = false\nseed = 2\n";
        let cfg = desk_run_config(&format!("{base}train.standardize = true\n"));
        let mut model: Model<f64> = Model::init(cfg.model.clone(), 1).unwrap();
        let out = train(&mut model, &mols, &split, &cfg, None).unwrap();
        assert_ne!(out.transform, TargetTransform::identity());
        // reported MAE stays in raw units: same magnitude scale as targets
        let val = out.metrics.split_rows("val")[0].mae;
        assert!(val.is_finite() && val > 0.0);
    }
}
