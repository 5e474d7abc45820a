//! Run configuration: flat `key = value` text with section prefixes
//! (`model.d = 64`), merged with command-line overrides. The fully resolved
//! configuration is echoed into the run directory so a run can be reproduced
//! from its artifacts alone.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Ordered key/value pairs; later entries override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pairs: Vec<(String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str, path: Option<&PathBuf>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(path, idx + 1, format!("expected key = value, found {line:?}"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(RawConfig { pairs })
    }

    pub fn from_file(path: &PathBuf) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, Some(path))
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    fn parse_key<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))),
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "data",
    "target",
    "split",
    "seed",
    "run_dir",
    "model.blocks",
    "model.d",
    "model.heads",
    "model.inner",
    "model.attention",
    "model.metric_act",
    "model.pos_encoder",
    "model.lap_k",
    "model.gpe_hidden",
    "model.metric_hidden",
    "model.vocab",
    "model.omega",
    "model.force_mode",
    "model.precision",
    "train.batch",
    "train.epochs",
    "train.max_steps",
    "train.lr",
    "train.rho",
    "train.augment",
    "train.mix_t",
    "train.patience",
    "train.threshold",
    "train.clip",
    "train.eval_every",
    "train.standardize",
    "train.wall_time",
    "train.sep_pairs",
];

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub data: Option<PathBuf>,
    pub target: String,
    pub split: (usize, usize, usize),
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub rho: f64,
    pub augment: bool,
    pub mix_t: f64,
    pub patience: usize,
    pub threshold: f64,
    pub clip: Option<f64>,
    pub eval_every: usize,
    pub standardize: bool,
    /// When off, the metrics `seconds` column is written as 0 so two runs
    /// with one seed produce byte-identical files.
    pub wall_time: bool,
    /// Validation pairs used for the separability-gap report.
    pub sep_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            epochs: 10,
            max_steps: None,
            lr: 1e-4,
            rho: 1e3,
            augment: true,
            mix_t: 1e4,
            patience: 10,
            threshold: 1e-4,
            clip: None,
            eval_every: 1,
            standardize: false,
            wall_time: true,
            sep_pairs: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run_dir: Option<PathBuf>,
}

fn check_known(raw: &RawConfig) -> Result<()> {
    for k in raw.keys() {
        if !KNOWN_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown configuration key {k:?}")));
        }
    }
    Ok(())
}

pub fn model_from_raw(raw: &RawConfig) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let omega = match raw.get("model.omega") {
        None => d.omega,
        Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| {
            Error::Config(format!("bad value {v:?} for model.omega"))
        })?),
    };
    let cfg = ModelConfig {
        blocks: raw.parse_key("model.blocks", d.blocks)?,
        dim: raw.parse_key("model.d", d.dim)?,
        heads: raw.parse_key("model.heads", d.heads)?,
        inner: raw.parse_key("model.inner", d.inner)?,
        variant: raw.parse_key("model.attention", d.variant)?,
        metric_act: raw.parse_key("model.metric_act", d.metric_act)?,
        pos_encoder: raw.parse_key("model.pos_encoder", d.pos_encoder)?,
        lap_k: raw.parse_key("model.lap_k", d.lap_k)?,
        gpe_hidden: raw.parse_key("model.gpe_hidden", d.gpe_hidden)?,
        metric_hidden: raw.parse_key("model.metric_hidden", d.metric_hidden)?,
        vocab: raw.parse_key("model.vocab", d.vocab)?,
        omega,
        force_mode: raw.parse_key("model.force_mode", d.force_mode)?,
        precision: raw.parse_key("model.precision", d.precision)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_to_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    let kv = |k: &str, v: String| (format!("model.{k}"), v);
    vec![
        kv("blocks", cfg.blocks.to_string()),
        kv("d", cfg.dim.to_string()),
        kv("heads", cfg.heads.to_string()),
        kv("inner", cfg.inner.to_string()),
        kv("attention", cfg.variant.to_string()),
        kv("metric_act", cfg.metric_act.to_string()),
        kv("pos_encoder", cfg.pos_encoder.to_string()),
        kv("lap_k", cfg.lap_k.to_string()),
        kv("gpe_hidden", cfg.gpe_hidden.to_string()),
        kv("metric_hidden", cfg.metric_hidden.to_string()),
        kv("vocab", cfg.vocab.to_string()),
        kv(
            "omega",
            cfg.omega.map(|w| w.to_string()).unwrap_or_else(|| "none".to_string()),
        ),
        kv("force_mode", cfg.force_mode.to_string()),
        kv("precision", cfg.precision.to_string()),
    ]
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        check_known(raw)?;
        let model = model_from_raw(raw)?;

        let dt = TrainConfig::default();
        let clip = match raw.get("train.clip") {
            None | Some("none") | Some("0") => None,
            Some(v) => {
                let c: f64 = v.parse().map_err(|_| {
                    Error::Config(format!("bad value {v:?} for train.clip"))
                })?;
                (c > 0.0).then_some(c)
            }
        };
        let max_steps = match raw.get("train.max_steps") {
            None | Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("bad value {v:?} for train.max_steps"))
            })?),
        };
        let train = TrainConfig {
            batch: raw.parse_key("train.batch", dt.batch)?,
            epochs: raw.parse_key("train.epochs", dt.epochs)?,
            max_steps,
            lr: raw.parse_key("train.lr", dt.lr)?,
            rho: raw.parse_key("train.rho", dt.rho)?,
            augment: raw.parse_key("train.augment", dt.augment)?,
            mix_t: raw.parse_key("train.mix_t", dt.mix_t)?,
            patience: raw.parse_key("train.patience", dt.patience)?,
            threshold: raw.parse_key("train.threshold", dt.threshold)?,
            clip,
            eval_every: raw.parse_key("train.eval_every", dt.eval_every)?,
            standardize: raw.parse_key("train.standardize", dt.standardize)?,
            wall_time: raw.parse_key("train.wall_time", dt.wall_time)?,
            sep_pairs: raw.parse_key("train.sep_pairs", dt.sep_pairs)?,
        };
        if train.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".to_string()));
        }
        if train.rho < 0.0 {
            return Err(Error::Config("train.rho must be >= 0".to_string()));
        }
        if train.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".to_string()));
        }

        let split_str = raw.get("split").unwrap_or("0,0,0");
        let parts: Vec<&str> = split_str.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "split must be train,val,test — found {split_str:?}"
            )));
        }
        let mut split = [0usize; 3];
        for (s, out) in parts.iter().zip(split.iter_mut()) {
            *out = s.trim().parse().map_err(|_| {
                Error::Config(format!("bad split component {s:?}"))
            })?;
        }
        let data = DataConfig {
            data: raw.get("data").map(PathBuf::from),
            target: raw.get("target").unwrap_or("U0").to_string(),
            split: (split[0], split[1], split[2]),
            seed: raw.parse_key("seed", 0u64)?,
        };
        let run_dir = raw.get("run_dir").map(PathBuf::from);
        Ok(RunConfig {
            model,
            train,
            data,
            run_dir,
        })
    }

    /// Canonical echo of every resolved key, sorted, for the run directory.
    pub fn resolved_text(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in model_to_pairs(&self.model) {
            map.insert(k, v);
        }
        let t = &self.train;
        let kv = |k: &str, v: String| (format!("train.{k}"), v);
        for (k, v) in [
            kv("batch", t.batch.to_string()),
            kv("epochs", t.epochs.to_string()),
            kv(
                "max_steps",
                t.max_steps.map(|v| v.to_string()).unwrap_or_else(|| "none".to_string()),
            ),
            kv("lr", t.lr.to_string()),
            kv("rho", t.rho.to_string()),
            kv("augment", t.augment.to_string()),
            kv("mix_t", t.mix_t.to_string()),
            kv("patience", t.patience.to_string()),
            kv("threshold", t.threshold.to_string()),
            kv(
                "clip",
                t.clip.map(|v| v.to_string()).unwrap_or_else(|| "none".to_string()),
            ),
            kv("eval_every", t.eval_every.to_string()),
            kv("standardize", t.standardize.to_string()),
            kv("wall_time", t.wall_time.to_string()),
            kv("sep_pairs", t.sep_pairs.to_string()),
        ] {
            map.insert(k, v);
        }
        if let Some(d) = &self.data.data {
            map.insert("data".to_string(), d.display().to_string());
        }
        map.insert("target".to_string(), self.data.target.clone());
        map.insert(
            "split".to_string(),
            format!("{},{},{}", self.data.split.0, self.data.split.1, self.data.split.2),
        );
        map.insert("seed".to_string(), self.data.seed.to_string());
        if let Some(r) = &self.run_dir {
            map.insert("run_dir".to_string(), r.display().to_string());
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Parse `key=value` override arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {a:?} is not key=value")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionVariant, MetricAct};
    use crate::model::{PosEncoder, Precision};

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "# a run\nmodel.d = 64\nmodel.heads = 4\ntarget = U0\nsplit = 6,2,2\nseed = 7\n";
        let mut raw = RawConfig::parse(text, None).unwrap();
        raw.set("model.heads", "8");
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.model.heads, 8); // override wins
        assert_eq!(cfg.data.split, (6, 2, 2));
        assert_eq!(cfg.data.seed, 7);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let raw = RawConfig::parse("model.dd = 3\n", None).unwrap();
        assert!(RunConfig::from_raw(&raw).is_err());
    }

    #[test]
    fn attention_routing() {
        let raw = RawConfig::parse("model.attention = mat_exp\nmodel.omega = 1.0\n", None).unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.model.variant, AttentionVariant::MatExp);
        assert_eq!(cfg.model.omega, Some(1.0));
    }

    #[test]
    fn omega_none_refuses_mat_exp() {
        let raw =
            RawConfig::parse("model.attention = mat_exp\nmodel.omega = none\n", None).unwrap();
        assert!(RunConfig::from_raw(&raw).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "model.d = 32\nmodel.heads = 4\nmodel.blocks = 2\ntrain.lr = 0.001\nseed = 3\n";
        let raw = RawConfig::parse(text, None).unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        let echoed = cfg.resolved_text();
        let raw2 = RawConfig::parse(&echoed, None).unwrap();
        let cfg2 = RunConfig::from_raw(&raw2).unwrap();
        assert_eq!(cfg2.resolved_text(), echoed);
        assert_eq!(cfg2.model.dim, 32);
        assert_eq!(cfg2.train.lr, 0.001);
    }

    #[test]
    fn default_metric_act_follows_paper_setup() {
        let raw = RawConfig::parse("", None).unwrap();
        let cfg = RunConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.model.metric_act, MetricAct::Relu);
        assert_eq!(cfg.model.blocks, 10);
        assert_eq!(cfg.model.dim, 512);
        assert_eq!(cfg.model.inner, 2048);
        assert_eq!(cfg.model.gpe_hidden, 1024);
        assert_eq!(cfg.model.metric_hidden, 50);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch, 32);
        assert_eq!(cfg.train.mix_t, 1e4);
        assert_eq!(cfg.train.rho, 1e3);
        assert_eq!(cfg.model.pos_encoder, PosEncoder::Gpe);
        assert_eq!(cfg.model.precision, Precision::F64);
    }
}
