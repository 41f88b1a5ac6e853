//! Deterministic training driver: shuffling, dropout streams, Adam updates,
//! checkpoint cadence and pretraining growth. File output is left to the
//! caller through the checkpoint callback.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{
    backward, forward_train, frame_errors, loss_and_grad, nll_sum, Dropout, ModelConfig,
    ModelParams, EOS,
};
use crate::optim::{adam_step, lr_schedule, AdamConfig, AdamState, LrConfig};
use crate::params::Params;
use crate::pretrain::{apply_pretrain_stage, stage_for_epoch, staged_config, validate_schedule, PretrainStage};
use crate::synth::SyntheticSample;
use crate::tensor::SeededRng;

const STREAM_INIT: u64 = 1 << 56;
const STREAM_SHUFFLE: u64 = 2 << 56;
const STREAM_DROPOUT: u64 = 3 << 56;
const STREAM_GROW: u64 = 4 << 56;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Final architecture. With a pretraining schedule the encoder layout
    /// of each stage overrides `model.encoder.pool_factors`.
    pub model: ModelConfig,
    pub lr: LrConfig,
    pub adam: AdamConfig,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub checkpoints_per_epoch: usize,
    pub seed: u64,
    pub pretrain_schedule: Vec<PretrainStage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 8,
                    hidden_per_direction: 32,
                    pool_factors: alloc::vec![2, 4],
                },
                grid_hidden: 32,
                embed_dim: 16,
                vocab_size: 24,
            },
            lr: LrConfig {
                base_lr: 2e-3,
                warmup_steps: 500,
                newbob_factor: 0.7,
                newbob_patience: 1,
            },
            adam: AdamConfig::default(),
            dropout_rate: 0.1,
            label_smoothing: 0.1,
            batch_size: 16,
            max_epochs: 30,
            checkpoints_per_epoch: 2,
            seed: 1,
            pretrain_schedule: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lr.validate()?;
        validate_schedule(&self.pretrain_schedule)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 || self.checkpoints_per_epoch == 0 {
            return bad(String::from("batch size and checkpoints per epoch must be ≥ 1"));
        }
        if let Some(last) = self.pretrain_schedule.last() {
            if last.layer_factors()? != self.model.encoder.pool_factors {
                return bad(String::from(
                    "last pretraining stage must match the model's encoder layout",
                ));
            }
        }
        Ok(())
    }

    /// Architecture in force during `epoch`.
    pub fn model_for_epoch(&self, epoch: usize) -> Result<ModelConfig> {
        match stage_for_epoch(&self.pretrain_schedule, epoch) {
            Some(s) => staged_config(&self.model, s),
            None => Ok(self.model.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub epoch: usize,
    /// Mean batch loss since the previous checkpoint.
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub dev_fer: f64,
    /// Learning rate of the most recent update.
    pub lr: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    /// Position of the next batch: epoch and batch index within it.
    pub epoch: usize,
    pub batch: usize,
    pub history: Vec<CheckpointMetrics>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_for_epoch(0)?;
        let params = ModelParams::init(&model, &mut SeededRng::with_stream(cfg.seed, STREAM_INIT))?;
        let adam = AdamState::new(&params, cfg.adam);
        Ok(TrainState {
            model,
            params,
            adam,
            step: 0,
            epoch: 0,
            batch: 0,
            history: Vec::new(),
        })
    }

    pub fn dev_ppls(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.dev_ppl).collect()
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.max_epochs
    }
}

/// Reference sequence: labels followed by EOS.
pub fn with_eos(labels: &[usize]) -> Vec<usize> {
    let mut r = labels.to_vec();
    r.push(EOS);
    r
}

/// Mean label-smoothed loss of a batch and its gradient. Per-sample
/// gradients are summed in batch order.
pub fn batch_gradient(
    batch: &[&SyntheticSample],
    model: &ModelConfig,
    params: &ModelParams,
    label_smoothing: f64,
    mut dropout: impl FnMut(usize) -> Option<(SeededRng, f64)>,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch_gradient"));
    }
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let k = 1.0 / batch.len() as f64;
    for (j, s) in batch.iter().enumerate() {
        let mut rng_rate = dropout(j);
        let dr = rng_rate
            .as_mut()
            .filter(|(_, rate)| *rate > 0.0)
            .map(|(rng, rate)| Dropout { rng, rate: *rate });
        let out = forward_train(&s.frames, &s.labels, model, params, dr)?;
        let (l, mut dlogits) = loss_and_grad(&out.logits, &with_eos(&s.labels), label_smoothing)?;
        dlogits.scale(k);
        backward(&out, &dlogits, params, &mut grads)?;
        loss += l * k;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TeacherForcedScores {
    pub nll: f64,
    pub errors: usize,
    pub rows: usize,
}

impl TeacherForcedScores {
    pub fn perplexity(&self) -> f64 {
        libm::exp(self.nll / self.rows.max(1) as f64)
    }

    pub fn fer(&self) -> f64 {
        self.errors as f64 / self.rows.max(1) as f64
    }
}

/// Corpus-level perplexity and FER without dropout, EOS rows included.
pub fn score_teacher_forced(
    samples: &[SyntheticSample],
    model: &ModelConfig,
    params: &ModelParams,
) -> Result<TeacherForcedScores> {
    let mut acc = TeacherForcedScores::default();
    for s in samples {
        let out = forward_train(&s.frames, &s.labels, model, params, None)?;
        let refs = with_eos(&s.labels);
        acc.nll += nll_sum(&out.logits, &refs)?;
        acc.errors += frame_errors(&out.logits, &refs)?;
        acc.rows += refs.len();
    }
    Ok(acc)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = SeededRng::with_stream(seed, STREAM_SHUFFLE | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.int_inclusive(0, i);
        idx.swap(i, j);
    }
    idx
}

fn is_checkpoint(batch_done: usize, batches: usize, per_epoch: usize) -> bool {
    (1..=per_epoch).any(|k| (k * batches).div_ceil(per_epoch) == batch_done)
}

/// Grows the model if a pretraining stage begins at the state's epoch.
fn enter_epoch(cfg: &TrainConfig, state: &mut TrainState) -> Result<()> {
    let Some(stage) = stage_for_epoch(&cfg.pretrain_schedule, state.epoch) else {
        return Ok(());
    };
    if staged_config(&state.model, stage)? == state.model {
        return Ok(());
    }
    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_GROW | state.epoch as u64);
    let (model, params) = apply_pretrain_stage(&state.model, &state.params, stage, &mut rng)?;
    state.model = model;
    state.params = params;
    state.adam.realign(&state.params);
    Ok(())
}

/// Trains from `state` until `cfg.max_epochs`, or until `on_checkpoint`
/// returns true. The callback sees the state positioned at the next batch,
/// already grown when that batch opens a new pretraining stage.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SyntheticSample],
    dev_set: &[SyntheticSample],
    state: &mut TrainState,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<bool>,
) -> Result<()> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if dev_set.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    while !state.finished(cfg) {
        let order = epoch_order(cfg.seed, state.epoch, n);
        let lo = state.batch * cfg.batch_size;
        let batch: Vec<&SyntheticSample> = order[lo..(lo + cfg.batch_size).min(n)]
            .iter()
            .map(|&i| &train_set[i])
            .collect();
        let step = state.step;
        let (loss, mut grads) = batch_gradient(
            &batch,
            &state.model,
            &state.params,
            cfg.label_smoothing,
            |j| {
                Some((
                    SeededRng::with_stream(cfg.seed, STREAM_DROPOUT | (step << 16) | j as u64),
                    cfg.dropout_rate,
                ))
            },
        )?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged(step + 1));
        }
        let lr = lr_schedule(step + 1, &state.dev_ppls(), &cfg.lr);
        adam_step(&mut state.params, &mut grads, &mut state.adam, lr)?;
        if !state.params.all_finite() {
            return Err(Error::Diverged(step + 1));
        }
        state.step += 1;
        loss_sum += loss;
        loss_count += 1;

        state.batch += 1;
        let done = state.batch;
        let epoch = state.epoch;
        let checkpoint = is_checkpoint(done, batches, cfg.checkpoints_per_epoch);
        if checkpoint {
            let dev = score_teacher_forced(dev_set, &state.model, &state.params)?;
            state.history.push(CheckpointMetrics {
                step: state.step,
                epoch,
                train_loss: loss_sum / loss_count as f64,
                dev_ppl: dev.perplexity(),
                dev_fer: dev.fer(),
                lr,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
        if state.batch == batches {
            state.batch = 0;
            state.epoch += 1;
            if !state.finished(cfg) {
                enter_epoch(cfg, state)?;
            }
        }
        if checkpoint && on_checkpoint(state)? {
            return Ok(());
        }
    }
    Ok(())
}
