//! Layer-wise encoder growth. Training starts shallow and stacks fresh
//! BiLSTM layers on top at scheduled epochs while the total time reduction
//! stays fixed.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::{BiLstmParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainStage {
    /// First epoch (0-based) trained with this layout.
    pub epoch: usize,
    pub layers: usize,
    /// Pool factors for the lowest layers; missing entries mean no pooling.
    pub pool_factors: Vec<usize>,
}

impl PretrainStage {
    /// Per-layer factors, padded with 1 up to the layer count.
    pub fn layer_factors(&self) -> Result<Vec<usize>> {
        if self.pool_factors.len() > self.layers {
            return Err(Error::Config(format!(
                "stage at epoch {} has {} pool factors for {} layers",
                self.epoch,
                self.pool_factors.len(),
                self.layers
            )));
        }
        let mut f = self.pool_factors.clone();
        f.resize(self.layers, 1);
        Ok(f)
    }
}

/// Checks ordering, monotone growth and a constant reduction factor.
pub fn validate_schedule(schedule: &[PretrainStage]) -> Result<()> {
    let Some(first) = schedule.first() else {
        return Ok(());
    };
    if first.epoch != 0 {
        return Err(Error::Config(format!(
            "first pretraining stage must start at epoch 0, not {}",
            first.epoch
        )));
    }
    let reduction: usize = first.layer_factors()?.iter().product();
    for pair in schedule.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.epoch <= a.epoch {
            return Err(Error::Config(format!(
                "pretraining epochs must increase ({} then {})",
                a.epoch, b.epoch
            )));
        }
        if b.layers < a.layers {
            return Err(Error::Config(format!(
                "pretraining cannot shrink the encoder from {} to {} layers",
                a.layers, b.layers
            )));
        }
    }
    for s in schedule {
        let f = s.layer_factors()?;
        if f.contains(&0) || s.layers == 0 {
            return Err(Error::Config(format!("degenerate stage at epoch {}", s.epoch)));
        }
        let r: usize = f.iter().product();
        if r != reduction {
            return Err(Error::Config(format!(
                "stage at epoch {} reduces by {r}, earlier stages by {reduction}",
                s.epoch
            )));
        }
    }
    Ok(())
}

/// The stage in force during `epoch`.
pub fn stage_for_epoch(schedule: &[PretrainStage], epoch: usize) -> Option<&PretrainStage> {
    schedule.iter().take_while(|s| s.epoch <= epoch).last()
}

/// Encoder layout of `cfg` replaced by that of `stage`.
pub fn staged_config(cfg: &ModelConfig, stage: &PretrainStage) -> Result<ModelConfig> {
    Ok(ModelConfig {
        encoder: EncoderConfig {
            pool_factors: stage.layer_factors()?,
            ..cfg.encoder.clone()
        },
        ..cfg.clone()
    })
}

/// Grows the encoder to `stage`. Existing layers are kept as they are and
/// new Glorot layers are stacked on top; only the pooling layout changes.
pub fn apply_pretrain_stage(
    cfg: &ModelConfig,
    params: &ModelParams,
    stage: &PretrainStage,
    rng: &mut SeededRng,
) -> Result<(ModelConfig, ModelParams)> {
    params.check(cfg)?;
    let have = cfg.encoder.num_layers();
    if stage.layers < have {
        return Err(Error::Config(format!(
            "pretraining cannot shrink the encoder from {have} to {} layers",
            stage.layers
        )));
    }
    let next = staged_config(cfg, stage)?;
    next.validate()?;
    if next.encoder.total_reduction() != cfg.encoder.total_reduction() {
        return Err(Error::Config(format!(
            "stage reduces time by {}, model by {}",
            next.encoder.total_reduction(),
            cfg.encoder.total_reduction()
        )));
    }
    let mut grown = params.clone();
    let d = cfg.encoder.hidden_per_direction;
    for _ in have..stage.layers {
        grown.encoder.layers.push(BiLstmParams::glorot(rng, 2 * d, d));
    }
    Ok((next, grown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_teacher_forced, loss_label_smoothed, EOS};
    use crate::params::Params;
    use crate::tensor::Tensor;

    fn stage(epoch: usize, layers: usize, f: &[usize]) -> PretrainStage {
        PretrainStage {
            epoch,
            layers,
            pool_factors: f.to_vec(),
        }
    }

    fn model(layers: usize, f: &[usize]) -> (ModelConfig, ModelParams) {
        let cfg = staged_config(
            &ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 3,
                    hidden_per_direction: 4,
                    pool_factors: alloc::vec![1],
                },
                grid_hidden: 4,
                embed_dim: 3,
                vocab_size: 6,
            },
            &stage(0, layers, f),
        )
        .unwrap();
        let p = ModelParams::init(&cfg, &mut SeededRng::new(5)).unwrap();
        (cfg, p)
    }

    #[test]
    fn same_stage_is_identity() {
        let (cfg, p) = model(2, &[8]);
        let (c2, p2) = apply_pretrain_stage(&cfg, &p, &stage(0, 2, &[8]), &mut SeededRng::new(1)).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn growth_keeps_reduction_and_old_layers() {
        let (cfg, p) = model(2, &[8]);
        assert_eq!(cfg.encoder.pool_factors, [8, 1]);
        let (c2, p2) =
            apply_pretrain_stage(&cfg, &p, &stage(3, 4, &[2, 4]), &mut SeededRng::new(1)).unwrap();
        assert_eq!(c2.encoder.pool_factors, [2, 4, 1, 1]);
        assert_eq!(c2.encoder.total_reduction(), 8);
        assert_eq!(p2.encoder.layers.len(), 4);
        assert_eq!(p2.encoder.layers[..2], p.encoder.layers[..]);
        assert_eq!(p2.grid, p.grid);
        p2.check(&c2).unwrap();

        let mut rng = SeededRng::new(9);
        let x = Tensor::new(&[20, 3], (0..60).map(|_| rng.normal()).collect()).unwrap();
        let labels = [2, 3, 4];
        let out = forward_teacher_forced(&x, &labels, &c2, &p2).unwrap();
        let loss = loss_label_smoothed(&out.logits, &[2, 3, 4, EOS], 0.1).unwrap();
        assert!(loss.is_finite());
        assert!(p2.all_finite());
    }

    #[test]
    fn bad_stages_rejected() {
        let (cfg, p) = model(2, &[8]);
        let mut rng = SeededRng::new(1);
        assert!(apply_pretrain_stage(&cfg, &p, &stage(1, 1, &[8]), &mut rng).is_err());
        assert!(apply_pretrain_stage(&cfg, &p, &stage(1, 3, &[2, 2]), &mut rng).is_err());
        assert!(validate_schedule(&[stage(0, 2, &[8]), stage(2, 1, &[8])]).is_err());
        assert!(validate_schedule(&[stage(1, 2, &[8])]).is_err());
        assert!(validate_schedule(&[stage(0, 2, &[8]), stage(0, 3, &[8])]).is_err());
        assert!(validate_schedule(&[stage(0, 2, &[8]), stage(2, 3, &[4])]).is_err());
        assert!(validate_schedule(&[stage(0, 2, &[8]), stage(2, 4, &[2, 4])]).is_ok());
        assert!(validate_schedule(&[]).is_ok());
    }

    #[test]
    fn stage_lookup() {
        let s = [stage(0, 2, &[8]), stage(2, 3, &[2, 4])];
        assert_eq!(stage_for_epoch(&s, 0).unwrap().layers, 2);
        assert_eq!(stage_for_epoch(&s, 1).unwrap().layers, 2);
        assert_eq!(stage_for_epoch(&s, 5).unwrap().layers, 3);
        assert!(stage_for_epoch(&[], 5).is_none());
    }
}
