//! Synthetic monotonic transduction task: every label is rendered as a run
//! of noisy copies of its prototype frame.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::tensor::{SeededRng, Tensor};

const FIRST_CONTENT: usize = Vocabulary::FIRST_CONTENT;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    pub content_vocab_size: usize,
    pub feature_dim: usize,
    pub repeats_min: usize,
    pub repeats_max: usize,
    pub noise_sigma: f64,
    pub label_len_min: usize,
    pub label_len_max: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            content_vocab_size: 20,
            feature_dim: 8,
            repeats_min: 6,
            repeats_max: 10,
            noise_sigma: 0.3,
            label_len_min: 2,
            label_len_max: 12,
            seed: 42,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(String::from(m)));
        if self.content_vocab_size < 2 {
            return bad("synthetic vocabulary needs at least 2 symbols");
        }
        if self.feature_dim == 0 {
            return bad("feature dimension must be positive");
        }
        if self.repeats_min == 0 || self.repeats_max < self.repeats_min {
            return Err(Error::Config(format!(
                "bad repeat range {}..={}",
                self.repeats_min, self.repeats_max
            )));
        }
        if self.label_len_min == 0 || self.label_len_max < self.label_len_min {
            return Err(Error::Config(format!(
                "bad label length range {}..={}",
                self.label_len_min, self.label_len_max
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.content_vocab_size)
    }

    /// One prototype frame per content symbol, drawn from N(0, 1).
    pub fn codebook(&self) -> Tensor {
        let mut rng = SeededRng::with_stream(self.seed, 0);
        let n = self.content_vocab_size * self.feature_dim;
        Tensor::new(
            &[self.content_vocab_size, self.feature_dim],
            (0..n).map(|_| rng.normal()).collect(),
        )
        .expect("shape matches")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `T × F`.
    pub frames: Tensor,
    /// Vocabulary ids, without BOS/EOS.
    pub labels: Vec<usize>,
}

pub fn generate_dataset(cfg: &SyntheticTaskConfig, n: usize) -> Result<Vec<SyntheticSample>> {
    generate_split(cfg, n, 0)
}

/// Samples of split `split`. All splits of one config share the codebook
/// but draw disjoint random streams, so train and dev sets come from the
/// same task.
pub fn generate_split(
    cfg: &SyntheticTaskConfig,
    n: usize,
    split: u32,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let codebook = cfg.codebook();
    let f = cfg.feature_dim;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let stream = ((split as u64 + 1) << 32) | i as u64;
        let mut rng = SeededRng::with_stream(cfg.seed, stream);
        let len = rng.int_inclusive(cfg.label_len_min, cfg.label_len_max);
        let symbols: Vec<usize> = (0..len)
            .map(|_| rng.int_inclusive(0, cfg.content_vocab_size - 1))
            .collect();
        let mut data = Vec::new();
        for &k in &symbols {
            let reps = rng.int_inclusive(cfg.repeats_min, cfg.repeats_max);
            for _ in 0..reps {
                for &p in codebook.row(k) {
                    data.push(p + cfg.noise_sigma * rng.normal());
                }
            }
        }
        let t = data.len() / f;
        out.push(SyntheticSample {
            id: format!("s{split}-{i:05}"),
            frames: Tensor::new(&[t, f], data)?,
            labels: symbols.into_iter().map(|k| k + FIRST_CONTENT).collect(),
        });
    }
    Ok(out)
}
