//! File-backed training, corpus decoding and scoring.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;

use seq2d_core::decode::{beam_search_with, BeamConfig, RowMode};
use seq2d_core::metrics::{evaluate, MetricsReport};
use seq2d_core::model::{ModelConfig, ModelParams, Vocabulary};
use seq2d_core::synth::SyntheticSample;
use seq2d_core::train::{score_teacher_forced, train, TrainState};

use crate::checkpoint::{load_state, save_state};
use crate::config::{config_hash, RunConfig};
use crate::error::Result;
use crate::formats::{format_metric_log, read_dataset, read_vocab, write_text, TranscriptLine};

pub const LAST_CHECKPOINT: &str = "last.g2s";
pub const METRIC_LOG: &str = "metrics.tsv";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:08}.g2s"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `out_dir/last.g2s` when it exists.
    pub resume: bool,
    /// Stop after this many checkpoints in this invocation.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    /// Checkpoints written by this invocation.
    pub written: usize,
}

/// Trains per `run`, writing a checkpoint and the metric log at every
/// checkpoint.
pub fn run_training(run: &RunConfig, opts: TrainOptions) -> Result<TrainRun> {
    let vocab = read_vocab(&run.vocab)?;
    let train_set = read_dataset(&run.train_data, &vocab)?;
    let dev_set = read_dataset(&run.dev_data, &vocab)?;
    let cfg = &run.train;
    let hash = config_hash(cfg);
    let last = run.out_dir.join(LAST_CHECKPOINT);
    let mut state = if opts.resume && last.exists() {
        let s = load_state(&last, hash, cfg.adam)?;
        info!("resuming from {} at step {}", last.display(), s.step);
        s
    } else {
        TrainState::init(cfg)?
    };
    info!(
        "training on {} samples, {} dev, {} parameters",
        train_set.len(),
        dev_set.len(),
        seq2d_core::Params::num_values(&state.params)
    );
    let start = Instant::now();
    let mut io_error = None;
    let mut written = 0;
    train(cfg, &train_set, &dev_set, &mut state, |s| {
        let m = s.history.last().expect("checkpoint recorded");
        info!(
            "step {} epoch {} loss {:.4} dev ppl {:.4} fer {:.4} lr {:.3e} ({:.0}s)",
            m.step,
            m.epoch,
            m.train_loss,
            m.dev_ppl,
            m.dev_fer,
            m.lr,
            start.elapsed().as_secs_f64()
        );
        let res = save_state(&checkpoint_path(&run.out_dir, s.step), s, hash)
            .and_then(|_| save_state(&last, s, hash))
            .and_then(|_| write_text(&run.out_dir.join(METRIC_LOG), &format_metric_log(&s.history)));
        written += 1;
        match res {
            Ok(()) => Ok(opts.stop_after.is_some_and(|n| written >= n)),
            Err(e) => {
                io_error = Some(e);
                Ok(true)
            }
        }
    })?;
    match io_error {
        Some(e) => Err(e),
        None => Ok(TrainRun { state, written }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub lines: Vec<TranscriptLine>,
    pub elapsed: Duration,
    pub cell_steps: u64,
    pub truncated: usize,
}

pub fn decode_corpus(
    samples: &[SyntheticSample],
    model: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocabulary,
    beam: &BeamConfig,
    mode: RowMode,
) -> Result<DecodeReport> {
    let start = Instant::now();
    let mut lines = Vec::with_capacity(samples.len());
    let mut cell_steps = 0;
    let mut truncated = 0;
    for s in samples {
        let r = beam_search_with(&s.frames, model, params, beam, mode)?;
        cell_steps += r.cell_steps;
        truncated += usize::from(r.truncated);
        lines.push(TranscriptLine {
            id: s.id.clone(),
            symbols: r.labels.iter().map(|&l| symbol(vocab, l)).collect(),
            log_prob: r.log_prob,
        });
    }
    Ok(DecodeReport {
        lines,
        elapsed: start.elapsed(),
        cell_steps,
        truncated,
    })
}

fn symbol(vocab: &Vocabulary, id: usize) -> String {
    vocab.symbol(id).map_or_else(|| format!("<{id}>"), String::from)
}

/// WER of transcripts against reference samples, compared by symbol.
pub fn score_transcripts(
    hyps: &[TranscriptLine],
    refs: &[SyntheticSample],
    vocab: &Vocabulary,
) -> Result<MetricsReport> {
    let h: Vec<(String, Vec<String>)> = hyps.iter().map(|l| (l.id.clone(), l.symbols.clone())).collect();
    let r: Vec<(String, Vec<String>)> = refs
        .iter()
        .map(|s| (s.id.clone(), s.labels.iter().map(|&l| symbol(vocab, l)).collect()))
        .collect();
    Ok(evaluate(&h, &r)?)
}

/// Adds teacher-forced perplexity and FER to a report.
pub fn add_teacher_forced(
    report: &mut MetricsReport,
    refs: &[SyntheticSample],
    model: &ModelConfig,
    params: &ModelParams,
) -> Result<()> {
    let s = score_teacher_forced(refs, model, params)?;
    report.perplexity = Some(s.perplexity());
    report.fer = Some(s.fer());
    Ok(())
}

/// A run argument is a transcript file or a directory holding
/// `transcripts.txt`.
pub fn transcript_file(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join("transcripts.txt")
    } else {
        run.to_path_buf()
    }
}
