//! Versioned checkpoint container: model configuration, every parameter
//! tensor as 64-bit values, and the training step. Values are written as the
//! hexadecimal bit pattern of the f64, so save/load round-trips are
//! bit-identical (f32 parameters widen to f64 exactly and narrow back
//! exactly).

use std::path::Path;

use crate::config::{model_from_raw, model_to_pairs, RawConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamEntry, ParamSet, Precision};
use crate::tensor::Elem;

const MAGIC: &str = "geoformer-ckpt";
const VERSION: &str = "v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    /// Affine target transform the model was trained under (mean, std);
    /// identity unless standardization was on.
    pub target_mean: f64,
    pub target_std: f64,
    /// (name, shape, 64-bit values) in schema order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint<E: Elem>(
    path: impl AsRef<Path>,
    model: &Model<E>,
    step: u64,
) -> Result<()> {
    save_checkpoint_with_transform(path, model, step, 0.0, 1.0)
}

pub fn save_checkpoint_with_transform<E: Elem>(
    path: impl AsRef<Path>,
    model: &Model<E>,
    step: u64,
    target_mean: f64,
    target_std: f64,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!("step {step}\n"));
    out.push_str(&format!(
        "transform {:016x} {:016x}\n",
        target_mean.to_bits(),
        target_std.to_bits()
    ));
    for (k, v) in model_to_pairs(&model.config) {
        out.push_str(&format!("config {k} = {v}\n"));
    }
    for e in model.params.entries() {
        out.push_str(&format!("param {} {}", e.name, e.shape.len()));
        for d in &e.shape {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
        let mut line = String::with_capacity(e.values.len() * 17);
        for (i, v) in e.values.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{:016x}", v.as_f64().to_bits()));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("end\n");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = format!("{MAGIC} {VERSION}");
    if header != expected {
        return Err(Error::Version {
            found: header.to_string(),
            expected,
        });
    }
    let bad = |msg: &str| Error::Data(format!("checkpoint {}: {msg}", path.display()));

    let step_line = lines.next().ok_or_else(|| bad("missing step line"))?;
    let step: u64 = step_line
        .strip_prefix("step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed step line"))?;
    let tf_line = lines.next().ok_or_else(|| bad("missing transform line"))?;
    let mut tf_toks = tf_line
        .strip_prefix("transform ")
        .ok_or_else(|| bad("malformed transform line"))?
        .split_whitespace();
    let mut tf_val = || -> Result<f64> {
        tf_toks
            .next()
            .and_then(|w| u64::from_str_radix(w, 16).ok())
            .map(f64::from_bits)
            .ok_or_else(|| bad("malformed transform line"))
    };
    let target_mean = tf_val()?;
    let target_std = tf_val()?;

    let mut raw = RawConfig::default();
    let mut params = Vec::new();
    let mut saw_end = false;
    while let Some(line) = lines.next() {
        if line == "end" {
            saw_end = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| bad("malformed config line"))?;
            raw.set(k.trim(), v.trim());
            continue;
        }
        let rest = line
            .strip_prefix("param ")
            .ok_or_else(|| bad("unexpected line"))?;
        let mut toks = rest.split_whitespace();
        let name = toks.next().ok_or_else(|| bad("param without name"))?.to_string();
        let rank: usize = toks
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("param without rank"))?;
        let shape: Vec<usize> = toks
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape extent"))?;
        if shape.len() != rank {
            return Err(bad("shape rank mismatch"));
        }
        let count: usize = shape.iter().product();
        let data_line = lines.next().ok_or_else(|| bad("missing value line"))?;
        let values: Vec<f64> = data_line
            .split_whitespace()
            .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad hex value"))?;
        if values.len() != count {
            return Err(bad(&format!(
                "parameter {name} has {} values, shape wants {count}",
                values.len()
            )));
        }
        params.push((name, shape, values));
    }
    if !saw_end {
        return Err(bad("missing end marker"));
    }
    let config = model_from_raw(&raw)?;
    Ok(Checkpoint {
        config,
        step,
        target_mean,
        target_std,
        params,
    })
}

/// Instantiate a model at element type `E` from a parsed checkpoint. The
/// checkpoint's declared precision must match `E`.
pub fn model_from_checkpoint<E: Elem>(ckpt: &Checkpoint) -> Result<Model<E>> {
    let want = match ckpt.config.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    if want != E::NAME {
        return Err(Error::Config(format!(
            "checkpoint precision {want} does not match requested element type {}",
            E::NAME
        )));
    }
    let entries = ckpt
        .params
        .iter()
        .map(|(name, shape, values)| ParamEntry {
            name: name.clone(),
            shape: clone_shape(shape),
            values: values.iter().map(|&v| E::from_f64(v)).collect(),
        })
        .collect();
    Model::from_parts(ckpt.config.clone(), ParamSet::from_entries(entries))
}

fn clone_shape(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let model: Model<f64> = Model::init(ModelConfig::desk(), 42).unwrap();
        save_checkpoint(&path, &model, 17).unwrap();
        let ckpt = read_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, 17);
        let again: Model<f64> = model_from_checkpoint(&ckpt).unwrap();
        for (a, b) in model.params.entries().iter().zip(again.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        std::fs::write(&path, "geoformer-ckpt v0\nstep 0\nend\n").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Version { .. }));
    }

    #[test]
    fn f32_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt32");
        let mut cfg = ModelConfig::desk();
        cfg.precision = Precision::F32;
        let model: Model<f32> = Model::init(cfg, 5).unwrap();
        save_checkpoint(&path, &model, 3).unwrap();
        let ckpt = read_checkpoint(&path).unwrap();
        let again: Model<f32> = model_from_checkpoint(&ckpt).unwrap();
        for (a, b) in model.params.entries().iter().zip(again.params.entries()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // wrong element type refuses to load
        assert!(model_from_checkpoint::<f64>(&ckpt).is_err());
    }
}
