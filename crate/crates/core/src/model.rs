//! The full conditional model: encoder → 2DLSTM grid → per-row max-pool
//! readout → softmax over labels.
//!
//! Row `n` of the grid consumes the embedding of the previous label
//! (`w₀ = BOS`) and predicts `w_n`; the extra row `N+1` predicts EOS.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{
    dropout_mask, encode_backward, encode_with_cache, EncoderCache, EncoderConfig, EncoderParams,
    EncoderStates,
};
use crate::error::{Error, Result};
use crate::params::{join, Params};
use crate::tensor::{
    glorot_init, log_softmax_into, matvec_acc, matvec_t_acc, outer_acc, tanh_scalar, SeededRng,
    Tensor,
};
use crate::twodlstm::{backward_grid, forward_grid, GridState, TwoDLstmParams};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const BOS_SYMBOL: &str = "<bos>";
pub const EOS_SYMBOL: &str = "<eos>";

/// Bijection between label symbols and ids. Ids 0 and 1 are always BOS and
/// EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 2 || symbols[BOS] != BOS_SYMBOL || symbols[EOS] != EOS_SYMBOL {
            return Err(Error::Config(format!(
                "vocabulary must start with {BOS_SYMBOL} and {EOS_SYMBOL}"
            )));
        }
        let mut ids = BTreeMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid symbol {s:?} at line {}", i + 1)));
            }
            if ids.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, ids })
    }

    /// `<bos> <eos> <pad> <unk>` followed by `content` generated symbols
    /// (`a`, `b`, … then `s26`, `s27`, …).
    pub fn synthetic(content: usize) -> Self {
        let mut symbols: Vec<String> = ["<bos>", "<eos>", "<pad>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0..content).map(content_symbol));
        Vocabulary::new(symbols).expect("synthetic vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Id of the first content symbol in a [`Vocabulary::synthetic`] table.
    pub const FIRST_CONTENT: usize = 4;
}

fn content_symbol(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        format!("s{i}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub grid_hidden: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn grid_input_dim(&self) -> usize {
        self.encoder.output_dim() + self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.grid_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(String::from("model dimensions must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(String::from(
                "vocabulary needs BOS, EOS and at least one label",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub grid: TwoDLstmParams,
    /// `V × e`.
    pub embedding: Tensor,
    /// `d × d` readout transform.
    pub readout_w: Tensor,
    pub readout_b: Tensor,
    /// `V × d` output projection.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.grid_hidden;
        let v = cfg.vocab_size;
        Ok(ModelParams {
            encoder: EncoderParams::glorot(rng, &cfg.encoder),
            grid: TwoDLstmParams::glorot(rng, cfg.grid_input_dim(), d),
            embedding: glorot_init(rng, &[v, cfg.embed_dim]),
            readout_w: glorot_init(rng, &[d, d]),
            readout_b: Tensor::zeros(&[d]),
            out_w: glorot_init(rng, &[v, d]),
            out_b: Tensor::zeros(&[v]),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.out_b.len()
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.grid_hidden;
        let v = cfg.vocab_size;
        Ok(ModelParams {
            encoder: EncoderParams::zeros(&cfg.encoder),
            grid: TwoDLstmParams::zeros(cfg.grid_input_dim(), d),
            embedding: Tensor::zeros(&[v, cfg.embed_dim]),
            readout_w: Tensor::zeros(&[d, d]),
            readout_b: Tensor::zeros(&[d]),
            out_w: Tensor::zeros(&[v, d]),
            out_b: Tensor::zeros(&[v]),
        })
    }

    /// Checks every tensor against the configured shapes.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::zeros(cfg)?;
        let a = self.named_tensors();
        let b = reference.named_tensors();
        if a.len() != b.len() {
            return Err(Error::dim(
                "ModelParams::check",
                format!("{} tensors present, {} expected", a.len(), b.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::dim(
                    "ModelParams::check",
                    format!("{na} {:?} vs expected {nb} {:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.grid.visit(&join(prefix, "grid"), f);
        f(join(prefix, "embedding"), &self.embedding);
        f(join(prefix, "readout.W"), &self.readout_w);
        f(join(prefix, "readout.b"), &self.readout_b);
        f(join(prefix, "output.W"), &self.out_w);
        f(join(prefix, "output.b"), &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.encoder.visit_mut(f);
        self.grid.visit_mut(f);
        f(&mut self.embedding);
        f(&mut self.readout_w);
        f(&mut self.readout_b);
        f(&mut self.out_w);
        f(&mut self.out_b);
    }
}

fn check_label(id: usize, vocab: usize) -> Result<()> {
    if id >= vocab {
        return Err(Error::LabelOutOfRange { id, size: vocab });
    }
    if id == BOS || id == EOS {
        return Err(Error::Config(format!("reserved id {id} inside a transcript")));
    }
    Ok(())
}

/// One row of grid inputs: `[h_t ; E[label]]` for every `t`, as `T' × m`.
pub fn row_inputs(h: &EncoderStates, embedding: &Tensor, label: usize) -> Tensor {
    let cols = h.reduced_len();
    let e = embedding.row(label);
    let m = h.h.row_len() + e.len();
    let mut data = Vec::with_capacity(cols * m);
    for t in 0..cols {
        data.extend_from_slice(h.h.row(t));
        data.extend_from_slice(e);
    }
    Tensor::new(&[cols, m], data).expect("row input shape")
}

/// Grid inputs for a labelled sequence: `T' × (N+1) × (2d_enc + e)`, where
/// row `n` carries `E[w_{n−1}]` and `w₀ = BOS`.
pub fn build_grid_inputs(h: &EncoderStates, labels: &[usize], embedding: &Tensor) -> Result<Tensor> {
    let v = embedding.rows();
    for &w in labels {
        check_label(w, v)?;
    }
    let cols = h.reduced_len();
    if cols == 0 {
        return Err(Error::Empty("build_grid_inputs"));
    }
    let rows = labels.len() + 1;
    let enc = h.h.row_len();
    let m = enc + embedding.row_len();
    let mut data = Vec::with_capacity(cols * rows * m);
    for t in 0..cols {
        for n in 0..rows {
            let prev = if n == 0 { BOS } else { labels[n - 1] };
            data.extend_from_slice(h.h.row(t));
            data.extend_from_slice(embedding.row(prev));
        }
    }
    Tensor::new(&[cols, rows, m], data)
}

/// Readout of one grid row given its hidden states (`T' × d`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct RowReadout {
    /// Per-feature max over time, after dropout if any.
    pub pooled: Vec<f64>,
    /// Winning column per feature.
    pub argmax: Vec<usize>,
    /// `tanh(W_r · pooled + b_r)`.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub dropout: Option<Vec<f64>>,
}

pub fn readout_row(p: &ModelParams, row_s: &[f64], dropout: Option<Vec<f64>>) -> RowReadout {
    let d = p.readout_b.len();
    let cols = row_s.len() / d;
    let mut pooled = row_s[..d].to_vec();
    let mut argmax = vec![0usize; d];
    for t in 1..cols {
        for j in 0..d {
            let v = row_s[t * d + j];
            if v > pooled[j] {
                pooled[j] = v;
                argmax[j] = t;
            }
        }
    }
    if let Some(mask) = &dropout {
        for (v, k) in pooled.iter_mut().zip(mask) {
            *v *= k;
        }
    }
    let mut hidden = p.readout_b.data().to_vec();
    matvec_acc(p.readout_w.data(), &pooled, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = tanh_scalar(*v));
    let mut logits = p.out_b.data().to_vec();
    matvec_acc(p.out_w.data(), &hidden, &mut logits);
    RowReadout {
        pooled,
        argmax,
        hidden,
        logits,
        dropout,
    }
}

/// Log-probabilities of the next label after a grid row.
pub fn row_log_probs(p: &ModelParams, row_s: &[f64]) -> Vec<f64> {
    let r = readout_row(p, row_s, None);
    let mut out = vec![0.0; r.logits.len()];
    log_softmax_into(&r.logits, &mut out);
    out
}

/// Teacher-forced forward result, with the activations needed by
/// [`backward`].
#[derive(Debug, Clone)]
pub struct TeacherForcedOutput {
    /// `(N+1) × V`.
    pub logits: Tensor,
    pub grid: GridState,
    /// Max-pool winners per row.
    pub argmax: Vec<Vec<usize>>,
    pub encoder_states: EncoderStates,
    labels: Vec<usize>,
    encoder_cache: EncoderCache,
    inputs: Tensor,
    readouts: Vec<RowReadout>,
}

impl TeacherForcedOutput {
    /// Reference ids for each row: the labels followed by EOS.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.labels.clone();
        t.push(EOS);
        t
    }
}

/// Dropout configuration for one training sample.
pub struct Dropout<'a> {
    pub rng: &'a mut SeededRng,
    pub rate: f64,
}

pub fn forward_teacher_forced(
    x: &Tensor,
    labels: &[usize],
    cfg: &ModelConfig,
    p: &ModelParams,
) -> Result<TeacherForcedOutput> {
    forward_train(x, labels, cfg, p, None)
}

/// Teacher-forced forward, optionally with dropout on every encoder layer
/// output and on each pooled readout vector.
pub fn forward_train(
    x: &Tensor,
    labels: &[usize],
    cfg: &ModelConfig,
    p: &ModelParams,
    mut dropout: Option<Dropout<'_>>,
) -> Result<TeacherForcedOutput> {
    let enc_dropout = dropout.as_mut().map(|d| (&mut *d.rng, d.rate));
    let (h, encoder_cache) = encode_with_cache(x, &cfg.encoder, &p.encoder, enc_dropout)?;
    let inputs = build_grid_inputs(&h, labels, &p.embedding)?;
    let grid = forward_grid(&inputs, &p.grid)?;
    let rows = labels.len() + 1;
    let v = p.vocab_size();
    let d = p.grid.hidden();
    let mut logits = Vec::with_capacity(rows * v);
    let mut readouts = Vec::with_capacity(rows);
    for n in 1..=rows {
        let row = grid.row_s(n);
        let mask = match dropout.as_mut() {
            Some(dr) if dr.rate > 0.0 => Some(dropout_mask(dr.rng, d, dr.rate)),
            _ => None,
        };
        let r = readout_row(p, row.data(), mask);
        logits.extend_from_slice(&r.logits);
        readouts.push(r);
    }
    Ok(TeacherForcedOutput {
        logits: Tensor::new(&[rows, v], logits)?,
        argmax: readouts.iter().map(|r| r.argmax.clone()).collect(),
        grid,
        encoder_states: h,
        labels: labels.to_vec(),
        encoder_cache,
        inputs,
        readouts,
    })
}

/// Backpropagates `dlogits` (`(N+1) × V`) through the whole model,
/// accumulating into `grads`.
pub fn backward(
    out: &TeacherForcedOutput,
    dlogits: &Tensor,
    p: &ModelParams,
    grads: &mut ModelParams,
) -> Result<()> {
    let rows = out.readouts.len();
    let v = p.vocab_size();
    if dlogits.shape() != [rows, v] {
        return Err(Error::dim(
            "backward",
            format!("dlogits {:?}, expected [{rows}, {v}]", dlogits.shape()),
        ));
    }
    let d = p.grid.hidden();
    let cols = out.grid.cols();
    let mut ds = Tensor::zeros(&[cols, rows, d]);
    for (n, r) in out.readouts.iter().enumerate() {
        let dl = dlogits.row(n);
        outer_acc(grads.out_w.data_mut(), dl, &r.hidden);
        for (b, g) in grads.out_b.data_mut().iter_mut().zip(dl) {
            *b += g;
        }
        let mut dhidden = vec![0.0; d];
        matvec_t_acc(p.out_w.data(), dl, &mut dhidden);
        let dz: Vec<f64> = dhidden
            .iter()
            .zip(&r.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        outer_acc(grads.readout_w.data_mut(), &dz, &r.pooled);
        for (b, g) in grads.readout_b.data_mut().iter_mut().zip(&dz) {
            *b += g;
        }
        let mut dpooled = vec![0.0; d];
        matvec_t_acc(p.readout_w.data(), &dz, &mut dpooled);
        if let Some(mask) = &r.dropout {
            for (g, k) in dpooled.iter_mut().zip(mask) {
                *g *= k;
            }
        }
        for (j, (&t, &g)) in r.argmax.iter().zip(&dpooled).enumerate() {
            ds.slot_mut(t * rows + n)[j] += g;
        }
    }
    let dinputs = backward_grid(&out.grid, &out.inputs, &ds, &p.grid, &mut grads.grid)?;
    let enc = out.encoder_states.h.row_len();
    let mut dh = Tensor::zeros(out.encoder_states.h.shape());
    for t in 0..cols {
        for n in 0..rows {
            let g = dinputs.slot(t * rows + n);
            for (a, b) in dh.row_mut(t).iter_mut().zip(&g[..enc]) {
                *a += b;
            }
            let prev = if n == 0 { BOS } else { out.labels[n - 1] };
            for (a, b) in grads.embedding.row_mut(prev).iter_mut().zip(&g[enc..]) {
                *a += b;
            }
        }
    }
    encode_backward(&out.encoder_cache, &p.encoder, &dh, &mut grads.encoder)?;
    Ok(())
}

fn check_refs(logits: &Tensor, refs: &[usize]) -> Result<()> {
    if logits.rows() != refs.len() {
        return Err(Error::dim(
            "loss",
            format!("{} logit rows for {} references", logits.rows(), refs.len()),
        ));
    }
    let v = logits.row_len();
    if let Some(&id) = refs.iter().find(|&&id| id >= v) {
        return Err(Error::LabelOutOfRange { id, size: v });
    }
    Ok(())
}

/// Mean over rows of the cross-entropy against the smoothed target
/// (`1−ε` on the reference, `ε/(V−1)` elsewhere), and its gradient w.r.t.
/// the logits.
pub fn loss_and_grad(logits: &Tensor, refs: &[usize], eps: f64) -> Result<(f64, Tensor)> {
    check_refs(logits, refs)?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let rows = refs.len();
    let v = logits.row_len();
    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let mut lp = vec![0.0; v];
    for (n, &r) in refs.iter().enumerate() {
        log_softmax_into(logits.row(n), &mut lp);
        let g = grad.row_mut(n);
        for k in 0..v {
            let target = if k == r { 1.0 - eps } else { off };
            if target != 0.0 {
                total -= target * lp[k];
            }
            g[k] = (libm::exp(lp[k]) - target) / rows as f64;
        }
    }
    Ok((total / rows as f64, grad))
}

pub fn loss_label_smoothed(logits: &Tensor, refs: &[usize], eps: f64) -> Result<f64> {
    loss_and_grad(logits, refs, eps).map(|(l, _)| l)
}

/// Sum over rows of `−log p(ref)`.
pub fn nll_sum(logits: &Tensor, refs: &[usize]) -> Result<f64> {
    check_refs(logits, refs)?;
    let mut lp = vec![0.0; logits.row_len()];
    let mut total = 0.0;
    for (n, &r) in refs.iter().enumerate() {
        log_softmax_into(logits.row(n), &mut lp);
        total -= lp[r];
    }
    Ok(total)
}

pub fn perplexity(logits: &Tensor, refs: &[usize]) -> Result<f64> {
    Ok(libm::exp(nll_sum(logits, refs)? / refs.len() as f64))
}

/// Index of the largest value, ties to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Rows whose argmax differs from the reference.
pub fn frame_errors(logits: &Tensor, refs: &[usize]) -> Result<usize> {
    check_refs(logits, refs)?;
    Ok(refs
        .iter()
        .enumerate()
        .filter(|(n, &r)| argmax(logits.row(*n)) != r)
        .count())
}

pub fn frame_error_rate(logits: &Tensor, refs: &[usize]) -> Result<f64> {
    if refs.is_empty() {
        return Ok(0.0);
    }
    Ok(frame_errors(logits, refs)? as f64 / refs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: 4,
                hidden_per_direction: 3,
                pool_factors: vec![2, 2],
            },
            grid_hidden: 4,
            embed_dim: 3,
            vocab_size: 5,
        }
    }

    fn frames(rng: &mut SeededRng, t: usize, f: usize) -> Tensor {
        Tensor::new(&[t, f], (0..t * f).map(|_| rng.normal()).collect()).unwrap()
    }

    fn randomize_biases(p: &mut ModelParams, rng: &mut SeededRng) {
        p.visit_mut(&mut |t| {
            if t.shape().len() == 1 {
                for v in t.data_mut() {
                    *v = 0.2 * rng.normal();
                }
            }
        });
    }

    #[test]
    fn vocabulary_rules() {
        let v = Vocabulary::synthetic(20);
        assert_eq!(v.len(), 24);
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.symbol(Vocabulary::FIRST_CONTENT), Some("a"));
        let bad = Vocabulary::new(vec!["<eos>".into(), "<bos>".into()]);
        assert!(bad.is_err());
        let dup = Vocabulary::new(vec!["<bos>".into(), "<eos>".into(), "a".into(), "a".into()]);
        assert!(dup.is_err());
    }

    #[test]
    fn grid_inputs_layout() {
        let mut rng = SeededRng::new(1);
        let h = EncoderStates { h: frames(&mut rng, 2, 6) };
        let e = frames(&mut rng, 5, 3);
        let g = build_grid_inputs(&h, &[], &e).unwrap();
        assert_eq!(g.shape(), &[2, 1, 9]);
        assert_eq!(&g.slot(0)[6..], e.row(BOS));

        let g = build_grid_inputs(&h, &[3], &e).unwrap();
        assert_eq!(g.shape(), &[2, 2, 9]);
        for t in 0..2 {
            assert_eq!(&g.slot(t * 2)[6..], e.row(BOS));
            assert_eq!(&g.slot(t * 2 + 1)[6..], e.row(3));
            for n in 0..2 {
                assert_eq!(&g.slot(t * 2 + n)[..6], h.h.row(t));
            }
        }
        assert_eq!(
            build_grid_inputs(&h, &[7], &e).unwrap_err(),
            Error::LabelOutOfRange { id: 7, size: 5 }
        );
        assert!(build_grid_inputs(&h, &[EOS], &e).is_err());
    }

    #[test]
    fn causality_by_perturbation() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(2);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = frames(&mut rng, 12, 4);
        let labels = [2, 3, 4, 2];
        let base = forward_teacher_forced(&x, &labels, &cfg, &p).unwrap();
        for n in 0..labels.len() {
            let mut changed = labels;
            changed[n] = if labels[n] == 4 { 2 } else { 4 };
            let out = forward_teacher_forced(&x, &changed, &cfg, &p).unwrap();
            // label n (0-based) feeds row n+1 (0-based), so rows 0..=n are fixed
            for row in 0..=n {
                assert_eq!(out.logits.row(row), base.logits.row(row));
            }
            assert_ne!(out.logits.row(n + 1), base.logits.row(n + 1));
        }
    }

    #[test]
    fn zero_grid_weights_give_constant_readout() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(3);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        p.grid = TwoDLstmParams::zeros(cfg.grid_input_dim(), cfg.grid_hidden);
        let x = frames(&mut rng, 9, 4);
        let out = forward_teacher_forced(&x, &[2, 3], &cfg, &p).unwrap();
        let mut expected = p.out_b.data().to_vec();
        let r: Vec<f64> = p.readout_b.data().iter().map(|&b| libm::tanh(b)).collect();
        matvec_acc(p.out_w.data(), &r, &mut expected);
        for n in 0..3 {
            assert_eq!(out.logits.row(n), &expected[..]);
        }
    }

    #[test]
    fn smoothed_loss_examples() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = loss_label_smoothed(&uniform, &[0, 1, 2], 0.0).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-15);

        let logits = Tensor::new(&[1, 2], vec![libm::log(9.0), 0.0]).unwrap();
        let l = loss_label_smoothed(&logits, &[0], 0.1).unwrap();
        let expected = -(0.9 * libm::log(0.9) + 0.1 * libm::log(0.1));
        assert!((l - expected).abs() < 1e-12);

        // stationary when the prediction equals the smoothed target
        let eps = 0.1;
        let target = [1.0 - eps, eps / 3.0, eps / 3.0, eps / 3.0];
        let logits = Tensor::new(&[1, 4], target.iter().map(|&p| libm::log(p)).collect()).unwrap();
        let (_, g) = loss_and_grad(&logits, &[0], eps).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));

        assert_eq!(
            loss_label_smoothed(&uniform, &[0, 1, 9], 0.1).unwrap_err(),
            Error::LabelOutOfRange { id: 9, size: 4 }
        );
    }

    #[test]
    fn fer_and_perplexity_examples() {
        let one_hot = Tensor::new(&[2, 3], vec![5.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(frame_error_rate(&one_hot, &[0, 2]).unwrap(), 0.0);
        assert_eq!(frame_error_rate(&one_hot, &[1, 1]).unwrap(), 1.0);
        let four = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(frame_error_rate(&four, &[0, 0, 0, 0]).unwrap(), 0.25);
        // ties go to the smaller id
        let tie = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(frame_error_rate(&tie, &[0]).unwrap(), 0.0);

        let certain = Tensor::new(&[2, 2], vec![0.0, -1e6, -1e6, 0.0]).unwrap();
        assert!((perplexity(&certain, &[0, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!((perplexity(&Tensor::zeros(&[3, 7]), &[0, 1, 2]).unwrap() - 7.0).abs() < 1e-12);
        let rows = Tensor::new(
            &[2, 2],
            vec![0.0, 0.0, libm::log(1.0 / 8.0), libm::log(7.0 / 8.0)],
        )
        .unwrap();
        assert!((perplexity(&rows, &[0, 0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_winning_frame_keeps_readout() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(5);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let d = cfg.grid_hidden;
        let row: Vec<f64> = (0..3 * d).map(|_| rng.normal()).collect();
        let base = readout_row(&p, &row, None);
        let win = base.argmax[0];
        let mut dup = row.clone();
        dup.extend_from_slice(&row[win * d..(win + 1) * d]);
        let again = readout_row(&p, &dup, None);
        assert_eq!(again.pooled, base.pooled);
        assert_eq!(again.logits, base.logits);
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 4,
                hidden_per_direction: 4,
                pool_factors: vec![2, 2],
            },
            grid_hidden: 5,
            embed_dim: 3,
            vocab_size: 5,
        };
        let mut rng = SeededRng::new(6);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        randomize_biases(&mut p, &mut rng);
        let x = frames(&mut rng, 12, 4);
        let labels = [2, 4, 3];
        let refs = [2, 4, 3, EOS];
        let loss = |q: &ModelParams| {
            let out = forward_teacher_forced(&x, &labels, &cfg, q).unwrap();
            loss_label_smoothed(&out.logits, &refs, 0.1).unwrap()
        };
        let out = forward_teacher_forced(&x, &labels, &cfg, &p).unwrap();
        let (_, dl) = loss_and_grad(&out.logits, &refs, 0.1).unwrap();
        let mut grads = p.zeros_like();
        backward(&out, &dl, &p, &mut grads).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let an = grads.tensors();
        let h = 1e-5;
        let mut q = p.clone();
        for ti in 0..an.len() {
            for e in 0..an[ti].len() {
                let orig = q.set_value(ti, e, 0.0);
                q.set_value(ti, e, orig + h);
                let lp = loss(&q);
                q.set_value(ti, e, orig - h);
                let lm = loss(&q);
                q.set_value(ti, e, orig);
                let num = (lp - lm) / (2.0 * h);
                let a = an[ti].data()[e];
                let rel = crate::gradcheck::relative_error(a, num);
                assert!(rel < 1e-5, "{} [{e}]: {a} vs {num}", names[ti]);
            }
        }
    }
}
