//! Deep bidirectional LSTM encoder with time max-pooling after each layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{join, Params};
use crate::tensor::{
    glorot_init, matvec_acc, matvec_t_acc, outer_acc, sigmoid_scalar, tanh_scalar, SeededRng,
    Tensor,
};

/// Gate order inside [`LstmCellParams`]: input, forget, output, candidate.
pub const LSTM_GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// Input weights, each `d × m`.
    pub w: [Tensor; 4],
    /// Recurrent weights, each `d × d`.
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: core::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            u: core::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: core::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn glorot(rng: &mut SeededRng, input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: core::array::from_fn(|_| glorot_init(rng, &[hidden, input])),
            u: core::array::from_fn(|_| glorot_init(rng, &[hidden, hidden])),
            b: core::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].shape()[1]
    }
}

impl Params for LstmCellParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, g) in LSTM_GATE_NAMES.iter().enumerate() {
            f(join(prefix, &format!("W_{g}")), &self.w[k]);
            f(join(prefix, &format!("U_{g}")), &self.u[k]);
            f(join(prefix, &format!("b_{g}")), &self.b[k]);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for k in 0..4 {
            f(&mut self.w[k]);
            f(&mut self.u[k]);
            f(&mut self.b[k]);
        }
    }
}

/// Gate activations of one recurrence step, kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct StepGates {
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn step_slices(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmCellParams,
    h: &mut [f64],
    c: &mut [f64],
) -> StepGates {
    let d = p.hidden();
    let mut pre: [Vec<f64>; 4] = core::array::from_fn(|k| p.b[k].data().to_vec());
    for (k, a) in pre.iter_mut().enumerate() {
        matvec_acc(p.w[k].data(), x, a);
        matvec_acc(p.u[k].data(), h_prev, a);
    }
    let [ai, af, ao, ag] = pre;
    let mut gates = StepGates {
        i: ai.into_iter().map(sigmoid_scalar).collect(),
        f: af.into_iter().map(sigmoid_scalar).collect(),
        o: ao.into_iter().map(sigmoid_scalar).collect(),
        g: ag.into_iter().map(tanh_scalar).collect(),
        tanh_c: vec![0.0; d],
    };
    for j in 0..d {
        c[j] = gates.f[j] * c_prev[j] + gates.i[j] * gates.g[j];
        gates.tanh_c[j] = tanh_scalar(c[j]);
        h[j] = gates.o[j] * gates.tanh_c[j];
    }
    gates
}

/// Backward of one step. Accumulates parameter gradients and adds into
/// `dx`, `dh_prev`, `dc_prev`.
#[allow(clippy::too_many_arguments)]
fn step_backward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &StepGates,
    p: &LstmCellParams,
    dh: &[f64],
    dc_in: &[f64],
    grads: &mut LstmCellParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let d = p.hidden();
    let mut da: [Vec<f64>; 4] = core::array::from_fn(|_| vec![0.0; d]);
    for j in 0..d {
        let (i, f, o, g, tc) = (
            gates.i[j],
            gates.f[j],
            gates.o[j],
            gates.g[j],
            gates.tanh_c[j],
        );
        let d_o = dh[j] * tc;
        let dc = dc_in[j] + dh[j] * o * (1.0 - tc * tc);
        dc_prev[j] += dc * f;
        da[0][j] = dc * g * i * (1.0 - i);
        da[1][j] = dc * c_prev[j] * f * (1.0 - f);
        da[2][j] = d_o * o * (1.0 - o);
        da[3][j] = dc * i * (1.0 - g * g);
    }
    for k in 0..4 {
        outer_acc(grads.w[k].data_mut(), &da[k], x);
        outer_acc(grads.u[k].data_mut(), &da[k], h_prev);
        for (b, a) in grads.b[k].data_mut().iter_mut().zip(&da[k]) {
            *b += a;
        }
        matvec_t_acc(p.w[k].data(), &da[k], dx);
        matvec_t_acc(p.u[k].data(), &da[k], dh_prev);
    }
}

/// One standard LSTM step: returns `(h, c)`.
pub fn lstm_step(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &LstmCellParams,
) -> Result<(Tensor, Tensor)> {
    let d = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "x [{}], h [{}], c [{}] against input {} hidden {}",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                p.input_dim(),
                d
            ),
        ));
    }
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    step_slices(x.data(), h_prev.data(), c_prev.data(), p, &mut h, &mut c);
    Ok((Tensor::from_vec(h), Tensor::from_vec(c)))
}

/// Activations of one direction over a whole sequence, in processing order
/// mapped back to frame indices.
#[derive(Debug, Clone)]
struct DirectionCache {
    /// `T × d`, indexed by frame.
    h: Vec<f64>,
    c: Vec<f64>,
    gates: Vec<StepGates>,
}

fn run_direction(seq: &Tensor, p: &LstmCellParams, reverse: bool) -> DirectionCache {
    let t_len = seq.rows();
    let d = p.hidden();
    let mut h = vec![0.0; t_len * d];
    let mut c = vec![0.0; t_len * d];
    let mut gates = vec![StepGates::default(); t_len];
    let zero = vec![0.0; d];
    let mut prev: Option<usize> = None;
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let (hp, cp) = match prev {
            Some(q) => (h[q * d..(q + 1) * d].to_vec(), c[q * d..(q + 1) * d].to_vec()),
            None => (zero.clone(), zero.clone()),
        };
        let (hs, cs) = (&mut h[t * d..(t + 1) * d], &mut c[t * d..(t + 1) * d]);
        gates[t] = step_slices(seq.row(t), &hp, &cp, p, hs, cs);
        prev = Some(t);
    }
    DirectionCache { h, c, gates }
}

/// Backprop through one direction; `dh_out` is `T × d` by frame, `dx` is
/// `T × m` by frame and accumulated into.
fn backward_direction(
    seq: &Tensor,
    p: &LstmCellParams,
    cache: &DirectionCache,
    dh_out: &[f64],
    reverse: bool,
    grads: &mut LstmCellParams,
    dx: &mut [f64],
) {
    let t_len = seq.rows();
    let d = p.hidden();
    let m = seq.row_len();
    let zero = vec![0.0; d];
    let mut dh_next = vec![0.0; d];
    let mut dc_next = vec![0.0; d];
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let (hp, cp) = match prev {
            Some(q) => (&cache.h[q * d..(q + 1) * d], &cache.c[q * d..(q + 1) * d]),
            None => (&zero[..], &zero[..]),
        };
        let dh: Vec<f64> = dh_out[t * d..(t + 1) * d]
            .iter()
            .zip(&dh_next)
            .map(|(a, b)| a + b)
            .collect();
        let mut dh_prev = vec![0.0; d];
        let mut dc_prev = vec![0.0; d];
        step_backward(
            seq.row(t),
            hp,
            cp,
            &cache.gates[t],
            p,
            &dh,
            &dc_next,
            grads,
            &mut dx[t * m..(t + 1) * m],
            &mut dh_prev,
            &mut dc_prev,
        );
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

impl BiLstmParams {
    pub fn glorot(rng: &mut SeededRng, input: usize, hidden: usize) -> Self {
        BiLstmParams {
            fwd: LstmCellParams::glorot(rng, input, hidden),
            bwd: LstmCellParams::glorot(rng, input, hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstmParams {
            fwd: LstmCellParams::zeros(input, hidden),
            bwd: LstmCellParams::zeros(input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }
}

impl Params for BiLstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.fwd.visit_mut(f);
        self.bwd.visit_mut(f);
    }
}

fn concat_directions(fwd: &[f64], bwd: &[f64], t_len: usize, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(t_len * 2 * d);
    for t in 0..t_len {
        out.extend_from_slice(&fwd[t * d..(t + 1) * d]);
        out.extend_from_slice(&bwd[t * d..(t + 1) * d]);
    }
    Tensor::new(&[t_len, 2 * d], out).expect("consistent shape")
}

fn check_sequence(op: &'static str, seq: &Tensor, input: usize) -> Result<()> {
    if seq.shape().len() != 2 || seq.rows() == 0 {
        return Err(Error::Empty(op));
    }
    if seq.row_len() != input {
        return Err(Error::dim(
            op,
            format!("frames have {} features, layer expects {}", seq.row_len(), input),
        ));
    }
    Ok(())
}

/// Forward (left to right) and backward (right to left) passes from zero
/// initial states, concatenated per frame as `[fwd; bwd]`.
pub fn bilstm_layer(seq: &Tensor, p: &BiLstmParams) -> Result<Tensor> {
    check_sequence("bilstm_layer", seq, p.fwd.input_dim())?;
    let f = run_direction(seq, &p.fwd, false);
    let b = run_direction(seq, &p.bwd, true);
    Ok(concat_directions(&f.h, &b.h, seq.rows(), p.fwd.hidden()))
}

/// Non-overlapping max-pooling over time. A trailing partial window is
/// pooled over the frames it has. Returns the pooled sequence and, per
/// output value, the source frame that won (ties to the earliest frame).
pub fn max_pool_time_with_argmax(seq: &Tensor, factor: usize) -> Result<(Tensor, Vec<usize>)> {
    if factor == 0 {
        return Err(Error::Config(String::from("pool factor must be ≥ 1")));
    }
    let t_len = seq.rows();
    let k = seq.row_len();
    let out_len = t_len.div_ceil(factor);
    let mut out = Vec::with_capacity(out_len * k);
    let mut arg = Vec::with_capacity(out_len * k);
    for w in 0..out_len {
        let start = w * factor;
        let end = (start + factor).min(t_len);
        for j in 0..k {
            let mut best = seq.row(start)[j];
            let mut bi = start;
            for t in start + 1..end {
                let v = seq.row(t)[j];
                if v > best {
                    best = v;
                    bi = t;
                }
            }
            out.push(best);
            arg.push(bi);
        }
    }
    Ok((Tensor::new(&[out_len, k], out)?, arg))
}

pub fn max_pool_time(seq: &Tensor, factor: usize) -> Result<Tensor> {
    max_pool_time_with_argmax(seq, factor).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_per_direction: usize,
    /// One factor per layer, applied after that layer (1 = no pooling).
    pub pool_factors: Vec<usize>,
}

impl EncoderConfig {
    pub fn num_layers(&self) -> usize {
        self.pool_factors.len()
    }

    pub fn total_reduction(&self) -> usize {
        self.pool_factors.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_per_direction
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_factors.is_empty() {
            return Err(Error::Config(String::from("encoder needs at least one layer")));
        }
        if self.pool_factors.contains(&0) {
            return Err(Error::Config(String::from("pool factors must be ≥ 1")));
        }
        if self.input_dim == 0 || self.hidden_per_direction == 0 {
            return Err(Error::Config(String::from("encoder dimensions must be positive")));
        }
        Ok(())
    }

    /// Reduced length for an input of `t` frames.
    pub fn reduced_len(&self, t: usize) -> usize {
        self.pool_factors.iter().fold(t, |len, &r| len.div_ceil(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<BiLstmParams>,
}

impl EncoderParams {
    pub fn glorot(rng: &mut SeededRng, cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_per_direction;
        let layers = (0..cfg.num_layers())
            .map(|l| {
                let input = if l == 0 { cfg.input_dim } else { 2 * d };
                BiLstmParams::glorot(rng, input, d)
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_per_direction;
        let layers = (0..cfg.num_layers())
            .map(|l| {
                let input = if l == 0 { cfg.input_dim } else { 2 * d };
                BiLstmParams::zeros(input, d)
            })
            .collect();
        EncoderParams { layers }
    }
}

impl Params for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}

/// Encoder output `h_1..h_T'`, each of width `2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub h: Tensor,
}

impl EncoderStates {
    pub fn reduced_len(&self) -> usize {
        self.h.rows()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor,
    fwd: DirectionCache,
    bwd: DirectionCache,
    pooled_rows: usize,
    argmax: Vec<usize>,
    dropout: Option<Vec<f64>>,
}

/// Everything [`encode_backward`] needs.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<LayerCache>,
}

/// Inverted-dropout mask: entries are 0 or `1/(1−rate)`.
pub fn dropout_mask(rng: &mut SeededRng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

fn check_params(cfg: &EncoderConfig, p: &EncoderParams) -> Result<()> {
    cfg.validate()?;
    if p.layers.len() != cfg.num_layers() {
        return Err(Error::dim(
            "encode",
            format!("{} layers configured, {} present", cfg.num_layers(), p.layers.len()),
        ));
    }
    Ok(())
}

/// Runs the encoder, optionally with dropout, keeping activations for the
/// backward pass.
pub fn encode_with_cache(
    x: &Tensor,
    cfg: &EncoderConfig,
    p: &EncoderParams,
    mut dropout: Option<(&mut SeededRng, f64)>,
) -> Result<(EncoderStates, EncoderCache)> {
    check_params(cfg, p)?;
    let mut input = x.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers());
    for (layer, &factor) in p.layers.iter().zip(&cfg.pool_factors) {
        check_sequence("encode", &input, layer.fwd.input_dim())?;
        let fwd = run_direction(&input, &layer.fwd, false);
        let bwd = run_direction(&input, &layer.bwd, true);
        let d = layer.fwd.hidden();
        let out = concat_directions(&fwd.h, &bwd.h, input.rows(), d);
        let (mut pooled, argmax) = max_pool_time_with_argmax(&out, factor)?;
        let mask = match dropout.as_mut() {
            Some((rng, rate)) if *rate > 0.0 => {
                let m = dropout_mask(rng, pooled.len(), *rate);
                for (v, k) in pooled.data_mut().iter_mut().zip(&m) {
                    *v *= k;
                }
                Some(m)
            }
            _ => None,
        };
        let pooled_rows = pooled.rows();
        layers.push(LayerCache {
            input: core::mem::replace(&mut input, pooled),
            fwd,
            bwd,
            pooled_rows,
            argmax,
            dropout: mask,
        });
    }
    Ok((EncoderStates { h: input }, EncoderCache { layers }))
}

pub fn encode(x: &Tensor, cfg: &EncoderConfig, p: &EncoderParams) -> Result<EncoderStates> {
    encode_with_cache(x, cfg, p, None).map(|(s, _)| s)
}

/// Backpropagates `dh` (`T' × 2d`) through the stack; accumulates into
/// `grads` and returns the gradient w.r.t. the input frames.
pub fn encode_backward(
    cache: &EncoderCache,
    p: &EncoderParams,
    dh: &Tensor,
    grads: &mut EncoderParams,
) -> Result<Tensor> {
    let mut upstream = dh.clone();
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &p.layers[l];
        let d = layer.fwd.hidden();
        if upstream.rows() != lc.pooled_rows || upstream.row_len() != 2 * d {
            return Err(Error::dim(
                "encode_backward",
                format!("gradient {:?} for layer {l}", upstream.shape()),
            ));
        }
        if let Some(mask) = &lc.dropout {
            for (g, k) in upstream.data_mut().iter_mut().zip(mask) {
                *g *= k;
            }
        }
        let t_len = lc.input.rows();
        // unpool
        let mut d_out = vec![0.0; t_len * 2 * d];
        for (idx, (&src, &g)) in lc.argmax.iter().zip(upstream.data()).enumerate() {
            let j = idx % (2 * d);
            d_out[src * 2 * d + j] += g;
        }
        let mut dh_f = vec![0.0; t_len * d];
        let mut dh_b = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &d_out[t * 2 * d..(t + 1) * 2 * d];
            dh_f[t * d..(t + 1) * d].copy_from_slice(&row[..d]);
            dh_b[t * d..(t + 1) * d].copy_from_slice(&row[d..]);
        }
        let mut dx = Tensor::zeros(lc.input.shape());
        let g = &mut grads.layers[l];
        backward_direction(&lc.input, &layer.fwd, &lc.fwd, &dh_f, false, &mut g.fwd, dx.data_mut());
        backward_direction(&lc.input, &layer.bwd, &lc.bwd, &dh_b, true, &mut g.bwd, dx.data_mut());
        upstream = dx;
    }
    Ok(upstream)
}
