//! Flat `key = value` run configuration.
//!
//! ```text
//! # data, relative to this file
//! train = data/train.txt
//! dev = data/dev.txt
//! vocab = data/vocab.txt
//! out_dir = run
//! pool_factors = 2,4
//! pretrain = 0:1:8; 4:2:2,4
//! ```
//!
//! `pretrain` lists `epoch:layers:factors` stages separated by `;`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use seq2d_core::pretrain::PretrainStage;
use seq2d_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::formats::{read_text, read_vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: PathBuf,
    pub dev_data: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "train",
    "dev",
    "vocab",
    "out_dir",
    "feature_dim",
    "encoder_hidden",
    "pool_factors",
    "grid_hidden",
    "embed_dim",
    "base_lr",
    "warmup_steps",
    "newbob_factor",
    "newbob_patience",
    "dropout_rate",
    "label_smoothing",
    "batch_size",
    "max_epochs",
    "checkpoints_per_epoch",
    "seed",
    "clip_norm",
    "pretrain",
];

/// Parses `key = value` lines. Unknown and repeated keys are errors.
pub fn parse_pairs(text: &str, path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, "expected key = value"))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::parse(path, i + 1, format!("unknown key {k:?}")));
        }
        if out.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::parse(path, i + 1, format!("key {k:?} given twice")));
        }
    }
    Ok(out)
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_stages(s: &str) -> Option<Vec<PretrainStage>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|stage| {
            let mut it = stage.trim().splitn(3, ':');
            Some(PretrainStage {
                epoch: it.next()?.trim().parse().ok()?,
                layers: it.next()?.trim().parse().ok()?,
                pool_factors: parse_list(it.next()?)?,
            })
        })
        .collect()
}

fn format_stages(stages: &[PretrainStage]) -> String {
    stages
        .iter()
        .map(|s| {
            let f: Vec<String> = s.pool_factors.iter().map(|x| x.to_string()).collect();
            format!("{}:{}:{}", s.epoch, s.layers, f.join(","))
        })
        .collect::<Vec<_>>()
        .join(";")
}

struct Fields<'a> {
    map: BTreeMap<String, (usize, String)>,
    path: &'a Path,
}

impl Fields<'_> {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::parse(self.path, *line, format!("bad value {v:?} for {key}"))),
        }
    }

    fn with<T>(&self, key: &str, default: T, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some((line, v)) => {
                f(v).ok_or_else(|| Error::parse(self.path, *line, format!("bad value {v:?} for {key}")))
            }
        }
    }

    fn path(&self, key: &str, base: &Path) -> Result<PathBuf> {
        let (_, v) = self
            .map
            .get(key)
            .ok_or_else(|| Error::parse(self.path, 0, format!("missing required key {key:?}")))?;
        Ok(base.join(v))
    }
}

/// Reads a run configuration; paths are resolved against the file's
/// directory and the vocabulary size comes from the vocabulary file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fields = Fields {
        map: parse_pairs(&text, path)?,
        path,
    };
    let vocab_path = fields.path("vocab", base)?;
    let vocab = read_vocab(&vocab_path)?;
    let d = TrainConfig::default();
    let mut t = d.clone();
    t.model.vocab_size = vocab.len();
    t.model.encoder.input_dim = fields.get("feature_dim", d.model.encoder.input_dim)?;
    t.model.encoder.hidden_per_direction = fields.get("encoder_hidden", d.model.encoder.hidden_per_direction)?;
    t.model.encoder.pool_factors = fields.with("pool_factors", d.model.encoder.pool_factors.clone(), parse_list)?;
    t.model.grid_hidden = fields.get("grid_hidden", d.model.grid_hidden)?;
    t.model.embed_dim = fields.get("embed_dim", d.model.embed_dim)?;
    t.lr.base_lr = fields.get("base_lr", d.lr.base_lr)?;
    t.lr.warmup_steps = fields.get("warmup_steps", d.lr.warmup_steps)?;
    t.lr.newbob_factor = fields.get("newbob_factor", d.lr.newbob_factor)?;
    t.lr.newbob_patience = fields.get("newbob_patience", d.lr.newbob_patience)?;
    t.dropout_rate = fields.get("dropout_rate", d.dropout_rate)?;
    t.label_smoothing = fields.get("label_smoothing", d.label_smoothing)?;
    t.batch_size = fields.get("batch_size", d.batch_size)?;
    t.max_epochs = fields.get("max_epochs", d.max_epochs)?;
    t.checkpoints_per_epoch = fields.get("checkpoints_per_epoch", d.checkpoints_per_epoch)?;
    t.seed = fields.get("seed", d.seed)?;
    let clip: f64 = fields.get("clip_norm", d.adam.clip_norm.unwrap_or(0.0))?;
    t.adam.clip_norm = (clip > 0.0).then_some(clip);
    t.pretrain_schedule = fields.with("pretrain", Vec::new(), parse_stages)?;
    t.validate()?;
    Ok(RunConfig {
        train: t,
        train_data: fields.path("train", base)?,
        dev_data: fields.path("dev", base)?,
        vocab: vocab_path,
        out_dir: fields.path("out_dir", base)?,
    })
}

/// Canonical text of everything that shapes the training trajectory.
/// `max_epochs` is left out so a finished run can be extended.
pub fn canonical(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let bits = |x: f64| format!("{:016x}", x.to_bits());
    let pools: Vec<String> = m.encoder.pool_factors.iter().map(|x| x.to_string()).collect();
    [
        format!("feature_dim={}", m.encoder.input_dim),
        format!("encoder_hidden={}", m.encoder.hidden_per_direction),
        format!("pool_factors={}", pools.join(",")),
        format!("grid_hidden={}", m.grid_hidden),
        format!("embed_dim={}", m.embed_dim),
        format!("vocab_size={}", m.vocab_size),
        format!("base_lr={}", bits(cfg.lr.base_lr)),
        format!("warmup_steps={}", cfg.lr.warmup_steps),
        format!("newbob_factor={}", bits(cfg.lr.newbob_factor)),
        format!("newbob_patience={}", cfg.lr.newbob_patience),
        format!("beta1={}", bits(cfg.adam.beta1)),
        format!("beta2={}", bits(cfg.adam.beta2)),
        format!("adam_eps={}", bits(cfg.adam.eps)),
        format!("clip_norm={}", bits(cfg.adam.clip_norm.unwrap_or(0.0))),
        format!("dropout_rate={}", bits(cfg.dropout_rate)),
        format!("label_smoothing={}", bits(cfg.label_smoothing)),
        format!("batch_size={}", cfg.batch_size),
        format!("checkpoints_per_epoch={}", cfg.checkpoints_per_epoch),
        format!("seed={}", cfg.seed),
        format!("pretrain={}", format_stages(&cfg.pretrain_schedule)),
    ]
    .join("\n")
}

pub fn config_hash(cfg: &TrainConfig) -> u64 {
    let digest = Sha256::digest(canonical(cfg).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
