//! Beam search that extends the 2DLSTM grid one row per emitted label.
//!
//! Each hypothesis keeps the last grid row it computed, so a step costs one
//! row (`T'` cell evaluations) per live hypothesis. [`RowMode::FullRecompute`]
//! instead rebuilds the whole grid for every prefix; it exists as an oracle
//! and for timing comparisons.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::encoder::{encode, EncoderStates};
use crate::error::{Error, Result};
use crate::model::{
    argmax, build_grid_inputs, forward_teacher_forced, row_inputs, row_log_probs, ModelConfig,
    ModelParams, BOS, EOS,
};
use crate::tensor::{log_softmax_into, Tensor};
use crate::twodlstm::{forward_grid, forward_row, RowState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMode {
    Incremental,
    FullRecompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Output row cap; `None` means `2·T' + 5`.
    pub max_rows: Option<usize>,
    /// Rank finished hypotheses by log-probability per emitted row. The
    /// early stop is then unsound, so the search runs to the row cap.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 12,
            max_rows: None,
            length_norm: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_rows == Some(0) {
            return Err(Error::Config(format!(
                "beam size and max rows must be ≥ 1, got {} and {:?}",
                self.beam_size, self.max_rows
            )));
        }
        Ok(())
    }

    pub fn rows_for(&self, cols: usize) -> usize {
        self.max_rows.unwrap_or(2 * cols + 5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted labels, without BOS or EOS.
    pub prefix: Vec<usize>,
    pub log_prob: f64,
    /// The grid row that scored the last label of `prefix` (the zero
    /// boundary row for an empty prefix).
    pub row_cache: RowState,
    pub finished: bool,
}

impl Hypothesis {
    pub fn initial(h: &EncoderStates, grid_hidden: usize) -> Self {
        Hypothesis {
            prefix: Vec::new(),
            log_prob: 0.0,
            row_cache: RowState::zeros(h.reduced_len(), grid_hidden),
            finished: false,
        }
    }

    fn last_label(&self) -> usize {
        self.prefix.last().copied().unwrap_or(BOS)
    }
}

/// Next row and next-label log-probabilities of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub row: RowState,
    pub log_probs: Vec<f64>,
}

/// Scores every unfinished hypothesis one row further. Finished ones yield
/// `None`. Returns the expansions and the cell evaluations spent.
pub fn decode_step(
    hyps: &[Hypothesis],
    h: &EncoderStates,
    p: &ModelParams,
    mode: RowMode,
) -> Result<(Vec<Option<Expansion>>, u64)> {
    let cols = h.reduced_len();
    let d = p.grid.hidden();
    let mut cells = 0;
    let mut out = Vec::with_capacity(hyps.len());
    for hyp in hyps {
        if hyp.finished {
            out.push(None);
            continue;
        }
        if hyp.row_cache.s.shape() != [cols, d] || hyp.row_cache.c.shape() != [cols, d] {
            return Err(Error::dim(
                "decode_step",
                format!(
                    "cached row {:?} does not match {cols} encoder states of width {d}",
                    hyp.row_cache.s.shape()
                ),
            ));
        }
        let row = match mode {
            RowMode::Incremental => {
                let x = row_inputs(h, &p.embedding, hyp.last_label());
                forward_row(&x, &hyp.row_cache, &p.grid)?
            }
            RowMode::FullRecompute => {
                let inputs = build_grid_inputs(h, &hyp.prefix, &p.embedding)?;
                let grid = forward_grid(&inputs, &p.grid)?;
                let mut row = grid.row_state(hyp.prefix.len() + 1);
                row.cell_steps = grid.cell_steps();
                row
            }
        };
        cells += row.cell_steps;
        let log_probs = row_log_probs(p, row.s.data());
        out.push(Some(Expansion { row, log_probs }));
    }
    Ok((out, cells))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub labels: Vec<usize>,
    /// Sum of per-row log-probabilities, EOS included when finished.
    pub log_prob: f64,
    /// The row cap was reached.
    pub truncated: bool,
    /// Grid rows computed along the returned hypothesis.
    pub rows: usize,
    /// Cell evaluations spent on the whole search.
    pub cell_steps: u64,
}

struct Candidate {
    parent: usize,
    label: usize,
    log_prob: f64,
}

/// Descending score, then ascending prefix.
fn rank(a_lp: f64, a: (&[usize], usize), b_lp: f64, b: (&[usize], usize)) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| {
        a.0.iter()
            .chain(core::iter::once(&a.1))
            .cmp(b.0.iter().chain(core::iter::once(&b.1)))
    })
}

fn final_score(h: &Hypothesis, cfg: &BeamConfig) -> f64 {
    if cfg.length_norm {
        h.log_prob / (h.prefix.len() + 1) as f64
    } else {
        h.log_prob
    }
}

pub fn beam_search(
    x: &Tensor,
    model: &ModelConfig,
    p: &ModelParams,
    cfg: &BeamConfig,
) -> Result<DecodeResult> {
    beam_search_with(x, model, p, cfg, RowMode::Incremental)
}

/// Beam search over label sequences. Each step keeps the best `beam_size`
/// unfinished extensions; EOS extensions ranked above the last kept one are
/// retired into the finished pool. Scores never increase along a path, so
/// the search stops as soon as the best finished score reaches the best
/// live one, which yields the same answer as running the beam to the row
/// cap.
pub fn beam_search_with(
    x: &Tensor,
    model: &ModelConfig,
    p: &ModelParams,
    cfg: &BeamConfig,
    mode: RowMode,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let h = encode(x, &model.encoder, &p.encoder)?;
    let max_rows = cfg.rows_for(h.reduced_len());
    let v = p.vocab_size();
    let mut beam = vec![Hypothesis::initial(&h, p.grid.hidden())];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut rows = 0;
    let mut cell_steps = 0;
    let mut truncated = false;
    loop {
        let best_live = beam.iter().map(|b| b.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|f| f.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if beam.is_empty() || (!cfg.length_norm && best_done >= best_live) {
            break;
        }
        if rows == max_rows {
            truncated = true;
            break;
        }
        let (expansions, cells) = decode_step(&beam, &h, p, mode)?;
        cell_steps += cells;
        rows += 1;

        let mut cands = Vec::with_capacity(beam.len() * v);
        for (i, e) in expansions.iter().enumerate() {
            let e = e.as_ref().expect("beam holds only live hypotheses");
            for (label, &lp) in e.log_probs.iter().enumerate() {
                if label != BOS {
                    cands.push(Candidate {
                        parent: i,
                        label,
                        log_prob: beam[i].log_prob + lp,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            rank(
                a.log_prob,
                (&beam[a.parent].prefix, a.label),
                b.log_prob,
                (&beam[b.parent].prefix, b.label),
            )
        });

        let mut next = Vec::with_capacity(cfg.beam_size);
        for c in cands {
            if next.len() == cfg.beam_size {
                break;
            }
            let parent = &beam[c.parent];
            let row = expansions[c.parent].as_ref().expect("live").row.clone();
            if c.label == EOS {
                finished.push(Hypothesis {
                    prefix: parent.prefix.clone(),
                    log_prob: c.log_prob,
                    row_cache: row,
                    finished: true,
                });
            } else {
                let mut prefix = parent.prefix.clone();
                prefix.push(c.label);
                next.push(Hypothesis {
                    prefix,
                    log_prob: c.log_prob,
                    row_cache: row,
                    finished: false,
                });
            }
        }
        beam = next;
    }

    let pool = if finished.is_empty() { &beam } else { &finished };
    let best = pool
        .iter()
        .min_by(|a, b| {
            rank(
                final_score(a, cfg),
                (&a.prefix, 0),
                final_score(b, cfg),
                (&b.prefix, 0),
            )
        })
        .expect("search keeps at least one hypothesis");
    Ok(DecodeResult {
        labels: best.prefix.clone(),
        log_prob: best.log_prob,
        truncated,
        rows: best.prefix.len() + usize::from(best.finished),
        cell_steps,
    })
}

/// Argmax decoding that re-runs the teacher-forced model on the growing
/// prefix at every step. Shares no search code with [`beam_search`].
pub fn greedy_decode(
    x: &Tensor,
    model: &ModelConfig,
    p: &ModelParams,
    max_rows: Option<usize>,
) -> Result<DecodeResult> {
    let cols = model.encoder.reduced_len(x.rows());
    let max_rows = max_rows.unwrap_or(2 * cols + 5);
    let mut labels = Vec::new();
    let mut log_prob = 0.0;
    let mut cell_steps = 0;
    let mut lp = vec![0.0; p.vocab_size()];
    for _ in 0..max_rows {
        let out = forward_teacher_forced(x, &labels, model, p)?;
        cell_steps += out.grid.cell_steps();
        log_softmax_into(out.logits.row(labels.len()), &mut lp);
        let best = argmax(&lp[1..]) + 1;
        log_prob += lp[best];
        if best == EOS {
            let rows = labels.len() + 1;
            return Ok(DecodeResult {
                labels,
                log_prob,
                truncated: false,
                rows,
                cell_steps,
            });
        }
        labels.push(best);
    }
    Ok(DecodeResult {
        rows: labels.len(),
        labels,
        log_prob,
        truncated: true,
        cell_steps,
    })
}

/// Per-row log-probabilities of a fixed prefix followed by EOS, computed
/// by stepping a single hypothesis through [`decode_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixScores {
    pub log_probs: Vec<Vec<f64>>,
    pub cell_steps: u64,
}

impl PrefixScores {
    /// Log-probability of `prefix` followed by EOS.
    pub fn total(&self, prefix: &[usize]) -> f64 {
        prefix
            .iter()
            .chain(core::iter::once(&EOS))
            .zip(&self.log_probs)
            .map(|(&w, lp)| lp[w])
            .sum()
    }
}

pub fn score_prefix(
    h: &EncoderStates,
    p: &ModelParams,
    prefix: &[usize],
    mode: RowMode,
) -> Result<PrefixScores> {
    let mut hyp = Hypothesis::initial(h, p.grid.hidden());
    let mut log_probs = Vec::with_capacity(prefix.len() + 1);
    let mut cell_steps = 0;
    for k in 0..=prefix.len() {
        let (mut e, cells) = decode_step(core::slice::from_ref(&hyp), h, p, mode)?;
        cell_steps += cells;
        let e = e.pop().flatten().expect("live hypothesis");
        log_probs.push(e.log_probs);
        if k < prefix.len() {
            hyp.prefix.push(prefix[k]);
            hyp.row_cache = e.row;
        }
    }
    Ok(PrefixScores {
        log_probs,
        cell_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::{nll_sum, ModelConfig};
    use crate::tensor::SeededRng;

    fn setup(seed: u64) -> (ModelConfig, ModelParams, Tensor) {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 3,
                hidden_per_direction: 4,
                pool_factors: vec![2],
            },
            grid_hidden: 5,
            embed_dim: 3,
            vocab_size: 6,
        };
        let mut rng = SeededRng::new(seed);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        // sharpen the output layer so paths differ in score
        p.out_w.scale(4.0);
        let x = Tensor::new(&[9, 3], (0..27).map(|_| rng.normal()).collect()).unwrap();
        (cfg, p, x)
    }

    #[test]
    fn step_scores_are_normalized_and_symmetric() {
        let (cfg, p, x) = setup(1);
        let h = encode(&x, &cfg.encoder, &p.encoder).unwrap();
        let hyps = vec![Hypothesis::initial(&h, 5), Hypothesis::initial(&h, 5)];
        let (e, cells) = decode_step(&hyps, &h, &p, RowMode::Incremental).unwrap();
        assert_eq!(cells, 2 * h.reduced_len() as u64);
        let a = e[0].as_ref().unwrap();
        assert_eq!(a, e[1].as_ref().unwrap());
        let total: f64 = a.log_probs.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let mut done = hyps[0].clone();
        done.finished = true;
        let (e, _) = decode_step(&[done], &h, &p, RowMode::Incremental).unwrap();
        assert!(e[0].is_none());

        let bad = Hypothesis {
            row_cache: RowState::zeros(h.reduced_len() + 1, 5),
            ..hyps[0].clone()
        };
        assert!(decode_step(&[bad], &h, &p, RowMode::Incremental).is_err());
    }

    #[test]
    fn cached_rows_match_full_grid() {
        let (cfg, p, x) = setup(2);
        let h = encode(&x, &cfg.encoder, &p.encoder).unwrap();
        let prefix = [3, 5, 2, 2];
        let inc = score_prefix(&h, &p, &prefix, RowMode::Incremental).unwrap();
        let full = score_prefix(&h, &p, &prefix, RowMode::FullRecompute).unwrap();
        assert_eq!(inc.log_probs, full.log_probs);
        let t = h.reduced_len() as u64;
        let r = prefix.len() as u64 + 1;
        assert_eq!(inc.cell_steps, r * t);
        assert_eq!(full.cell_steps, r * (r + 1) / 2 * t);

        let tf = forward_teacher_forced(&x, &prefix, &cfg, &p).unwrap();
        let mut refs = prefix.to_vec();
        refs.push(EOS);
        assert_eq!(-nll_sum(&tf.logits, &refs).unwrap(), inc.total(&prefix));
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let (cfg, p, x) = setup(seed);
            let b = beam_search(
                &x,
                &cfg,
                &p,
                &BeamConfig {
                    beam_size: 1,
                    ..Default::default()
                },
            )
            .unwrap();
            let g = greedy_decode(&x, &cfg, &p, None).unwrap();
            assert_eq!(b.labels, g.labels, "seed {seed}");
            assert_eq!(b.truncated, g.truncated);
            if !b.truncated {
                assert_eq!(b.log_prob, g.log_prob);
            }
        }
    }

    #[test]
    fn beam_results_revalidate_and_modes_agree() {
        for seed in 0..6 {
            let (cfg, p, x) = setup(seed);
            let mut last = f64::NEG_INFINITY;
            for b in [1, 2, 4, 12] {
                let bc = BeamConfig {
                    beam_size: b,
                    ..Default::default()
                };
                let r = beam_search(&x, &cfg, &p, &bc).unwrap();
                let f = beam_search_with(&x, &cfg, &p, &bc, RowMode::FullRecompute).unwrap();
                assert_eq!(r.labels, f.labels);
                assert_eq!(r.log_prob, f.log_prob);
                if r.rows >= 2 {
                    assert!(r.cell_steps < f.cell_steps);
                }
                if !r.truncated {
                    let tf = forward_teacher_forced(&x, &r.labels, &cfg, &p).unwrap();
                    let mut refs = r.labels.clone();
                    refs.push(EOS);
                    let lp = -nll_sum(&tf.logits, &refs).unwrap();
                    assert!((lp - r.log_prob).abs() < 1e-10);
                    assert!(r.log_prob >= last - 1e-12, "seed {seed} beam {b}");
                    last = r.log_prob;
                }
                let cols = h_len(&cfg, &x);
                assert!(r.cell_steps <= (b * bc.rows_for(cols) * cols) as u64);
            }
        }
    }

    fn h_len(cfg: &ModelConfig, x: &Tensor) -> usize {
        cfg.encoder.reduced_len(x.rows())
    }

    #[test]
    fn row_cap_truncates() {
        let (cfg, mut p, x) = setup(3);
        // never emit EOS
        p.out_b.data_mut()[EOS] = -1e3;
        let bc = BeamConfig {
            beam_size: 3,
            max_rows: Some(4),
            length_norm: false,
        };
        let r = beam_search(&x, &cfg, &p, &bc).unwrap();
        assert!(r.truncated);
        assert_eq!(r.labels.len(), 4);
        let g = greedy_decode(&x, &cfg, &p, Some(4)).unwrap();
        assert!(g.truncated);
        assert!(BeamConfig { beam_size: 0, ..bc }.validate().is_err());
    }
}
