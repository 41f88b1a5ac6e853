//! `seq2d` subcommands.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use seq2d_core::decode::{BeamConfig, RowMode};
use seq2d_core::gradcheck::{grad_check, GradCheckConfig};
use seq2d_core::metrics::mean;
use seq2d_core::synth::{generate_split, SyntheticTaskConfig};

use crate::checkpoint::load_model;
use crate::config::load_run_config;
use crate::formats::{format_transcripts, read_dataset, read_transcripts, read_vocab, write_dataset, write_text, write_vocab};
use crate::run::{add_teacher_forced, decode_corpus, run_training, score_transcripts, transcript_file, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "seq2d", version, about = "Attention-free 2D sequence-to-sequence model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/dev corpus and its vocabulary.
    GenData(GenData),
    /// Train from a key=value config file.
    Train(Train),
    /// Decode a dataset with a checkpoint.
    Decode(Decode),
    /// Compare analytic and finite-difference gradients on a small model.
    GradCheck(GradCheck),
    /// Score transcripts against references.
    Eval(Eval),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Dev samples [default: n/10, at least 1].
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 6)]
    repeats_min: usize,
    #[arg(long, default_value_t = 10)]
    repeats_max: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 2)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many checkpoints.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Debug, Args)]
struct Decode {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Transcript file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    beam: usize,
    /// Output row cap [default: 2·T' + 5].
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long)]
    length_norm: bool,
    /// Recompute the whole grid for every prefix instead of one row.
    #[arg(long)]
    full_recompute: bool,
    /// Report the number of 2DLSTM cell evaluations.
    #[arg(long)]
    count_cells: bool,
}

#[derive(Debug, Args)]
struct GradCheck {
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Debug, Args)]
struct Eval {
    /// Reference dataset.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Transcript files or run directories holding transcripts.txt; the
    /// mean WER is reported when more than one is given.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Also report teacher-forced perplexity and FER of this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn gen_data(a: GenData) -> anyhow::Result<i32> {
    let cfg = SyntheticTaskConfig {
        content_vocab_size: a.vocab_size,
        feature_dim: a.feature_dim,
        repeats_min: a.repeats_min,
        repeats_max: a.repeats_max,
        noise_sigma: a.noise_sigma,
        label_len_min: a.len_min,
        label_len_max: a.len_max,
        seed: a.seed,
    };
    let n_dev = a.n_dev.unwrap_or((a.n / 10).max(1));
    let vocab = cfg.vocabulary();
    let train = generate_split(&cfg, a.n, 0)?;
    let dev = generate_split(&cfg, n_dev, 1)?;
    write_dataset(&a.out.join("train.txt"), &train, &vocab)?;
    write_dataset(&a.out.join("dev.txt"), &dev, &vocab)?;
    write_vocab(&a.out.join("vocab.txt"), &vocab)?;
    println!(
        "wrote {} train and {} dev samples to {}",
        train.len(),
        dev.len(),
        a.out.display()
    );
    Ok(0)
}

fn train(a: Train) -> anyhow::Result<i32> {
    let run = load_run_config(&a.config)?;
    let done = run_training(
        &run,
        TrainOptions {
            resume: a.resume,
            stop_after: a.stop_after,
        },
    )?;
    match done.state.history.last().filter(|_| done.written > 0) {
        Some(m) => println!(
            "step {}: dev perplexity {:.4}, dev FER {:.4}; checkpoints in {}",
            m.step,
            m.dev_ppl,
            m.dev_fer,
            run.out_dir.display()
        ),
        None => println!("nothing to do: already trained for {} epochs", run.train.max_epochs),
    }
    Ok(0)
}

fn decode(a: Decode) -> anyhow::Result<i32> {
    let vocab = read_vocab(&a.vocab)?;
    let (model, params) = load_model(&a.checkpoint)?;
    if model.vocab_size != vocab.len() {
        bail!(
            "checkpoint has {} output labels, vocabulary {} has {}",
            model.vocab_size,
            a.vocab.display(),
            vocab.len()
        );
    }
    let data = read_dataset(&a.data, &vocab)?;
    let beam = BeamConfig {
        beam_size: a.beam,
        max_rows: a.max_rows,
        length_norm: a.length_norm,
    };
    let mode = if a.full_recompute {
        RowMode::FullRecompute
    } else {
        RowMode::Incremental
    };
    let report = decode_corpus(&data, &model, &params, &vocab, &beam, mode)?;
    let text = format_transcripts(&report.lines);
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    let mut summary = format!(
        "decoded {} samples in {:.3}s",
        report.lines.len(),
        report.elapsed.as_secs_f64()
    );
    if a.count_cells {
        summary += &format!(", {} cell steps", report.cell_steps);
    }
    if report.truncated > 0 {
        summary += &format!(", {} hit the row cap", report.truncated);
    }
    eprintln!("{summary}");
    Ok(0)
}

fn grad_check_cmd(a: GradCheck) -> anyhow::Result<i32> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        tolerance: a.tolerance,
        step: a.step,
        ..Default::default()
    };
    let report = grad_check(&cfg)?;
    println!("{:<28} {:>6} {:>12}  status", "tensor", "values", "max rel err");
    for t in &report.tensors {
        println!(
            "{:<28} {:>6} {:>12.3e}  {}",
            t.name,
            t.values,
            t.max_rel_err,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = report.tensors.iter().filter(|t| !t.passed).count();
    println!(
        "{} of {} tensors within {:e} (worst {:.3e})",
        report.tensors.len() - failed,
        report.tensors.len(),
        report.tolerance,
        report.worst()
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn eval(a: Eval) -> anyhow::Result<i32> {
    let vocab = read_vocab(&a.vocab)?;
    let refs = read_dataset(&a.reference, &vocab)?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let mut wers = Vec::new();
    for run in &a.runs {
        let file = transcript_file(run);
        let hyps = read_transcripts(&file)?;
        let mut rep = score_transcripts(&hyps, &refs, &vocab)
            .with_context(|| format!("scoring {}", file.display()))?;
        let mut line = format!(
            "{}: WER {:.2}% ({} sub, {} ins, {} del over {} labels, {} samples)",
            run.display(),
            100.0 * rep.wer,
            rep.edits.substitutions,
            rep.edits.insertions,
            rep.edits.deletions,
            rep.reference_labels,
            rep.samples
        );
        if let Some((cfg, params)) = &model {
            add_teacher_forced(&mut rep, &refs, cfg, params)?;
            line += &format!(
                ", perplexity {:.4}, FER {:.2}%",
                rep.perplexity.unwrap_or(f64::NAN),
                100.0 * rep.fer.unwrap_or(f64::NAN)
            );
        }
        println!("{line}");
        wers.push(rep.wer);
    }
    if wers.len() > 1 {
        println!(
            "mean WER over {} runs: {:.2}%",
            wers.len(),
            100.0 * mean(&wers).expect("non-empty")
        );
    }
    Ok(0)
}
