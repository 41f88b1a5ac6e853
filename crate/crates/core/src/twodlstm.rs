//! The 2DLSTM cell and its evaluation over a `T' × N` grid.
//!
//! Cell `(t, n)` reads its input `x_{t,n}`, the horizontal neighbour
//! `(t−1, n)` and the vertical neighbour `(t, n−1)`:
//!
//! ```text
//! i = σ(W₁x + U₁s_left + V₁s_above + b₁)
//! f = σ(W₂x + U₂s_left + V₂s_above + b₂)
//! o = σ(W₃x + U₃s_left + V₃s_above + b₃)
//! c̃ = tanh(W₄x + U₄s_left + V₄s_above + b₄)
//! λ = σ(W₅x + U₅s_left + V₅s_above + b₅)
//! c = f ∘ [λ ∘ c_left + (1 − λ) ∘ c_above] + c̃ ∘ i
//! s = tanh(c) ∘ o
//! ```
//!
//! Grid indices are 1-based; index 0 on either axis is the all-zero
//! boundary. A grid row `n` is the scan over `t = 1..=T'` for one label
//! position, so a full grid is exactly the stack of its rows, which is what
//! lets the decoder extend hypotheses one row at a time.

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

/// Gate slots, numbered as in the cell equations above (minus one).
pub const INPUT: usize = 0;
pub const FORGET: usize = 1;
pub const OUTPUT: usize = 2;
pub const CANDIDATE: usize = 3;
pub const LAMBDA: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoDLstmParams {
    /// Input weights `W₁..W₅`, each `d × m`.
    pub w: [Tensor; 5],
    /// Horizontal recurrent weights `U₁..U₅`, each `d × d`.
    pub u: [Tensor; 5],
    /// Vertical recurrent weights `V₁..V₅`, each `d × d`.
    pub v: [Tensor; 5],
    pub b: [Tensor; 5],
}

impl TwoDLstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        TwoDLstmParams {
            w: core::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            u: core::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            v: core::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: core::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn glorot(rng: &mut SeededRng, input: usize, hidden: usize) -> Self {
        TwoDLstmParams {
            w: core::array::from_fn(|_| glorot_init(rng, &[hidden, input])),
            u: core::array::from_fn(|_| glorot_init(rng, &[hidden, hidden])),
            v: core::array::from_fn(|_| glorot_init(rng, &[hidden, hidden])),
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

impl Params for TwoDLstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for k in 0..5 {
            f(join(prefix, &format!("W_{}", k + 1)), &self.w[k]);
            f(join(prefix, &format!("U_{}", k + 1)), &self.u[k]);
            f(join(prefix, &format!("V_{}", k + 1)), &self.v[k]);
            f(join(prefix, &format!("b_{}", k + 1)), &self.b[k]);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for k in 0..5 {
            f(&mut self.w[k]);
            f(&mut self.u[k]);
            f(&mut self.v[k]);
            f(&mut self.b[k]);
        }
    }
}

/// Gate activations of one cell: `[i, f, o, c̃, λ]` followed by `tanh(c)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellGates {
    pub gates: [Vec<f64>; 5],
    pub tanh_c: Vec<f64>,
}

/// Inputs to one cell evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CellIO<'a> {
    pub x: &'a [f64],
    pub s_left: &'a [f64],
    pub c_left: &'a [f64],
    pub s_above: &'a [f64],
    pub c_above: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
    pub gates: CellGates,
}

fn cell_into(io: &CellIO<'_>, p: &TwoDLstmParams, s: &mut [f64], c: &mut [f64]) -> CellGates {
    let d = p.hidden();
    let mut pre: [Vec<f64>; 5] = core::array::from_fn(|k| p.b[k].data().to_vec());
    for (k, a) in pre.iter_mut().enumerate() {
        matvec_acc(p.w[k].data(), io.x, a);
        matvec_acc(p.u[k].data(), io.s_left, a);
        matvec_acc(p.v[k].data(), io.s_above, a);
    }
    for (k, a) in pre.iter_mut().enumerate() {
        if k == CANDIDATE {
            a.iter_mut().for_each(|v| *v = tanh_scalar(*v));
        } else {
            a.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        }
    }
    let mut tanh_c = vec![0.0; d];
    for j in 0..d {
        let lambda = pre[LAMBDA][j];
        let mixed = lambda * io.c_left[j] + (1.0 - lambda) * io.c_above[j];
        c[j] = pre[FORGET][j] * mixed + pre[CANDIDATE][j] * pre[INPUT][j];
        tanh_c[j] = tanh_scalar(c[j]);
        s[j] = tanh_c[j] * pre[OUTPUT][j];
    }
    CellGates { gates: pre, tanh_c }
}

/// Evaluates one cell.
pub fn cell_step(io: &CellIO<'_>, p: &TwoDLstmParams) -> Result<CellOutput> {
    let d = p.hidden();
    let ok = io.x.len() == p.input_dim()
        && [io.s_left, io.c_left, io.s_above, io.c_above]
            .iter()
            .all(|v| v.len() == d);
    if !ok {
        return Err(Error::dim(
            "cell_step",
            format!(
                "x [{}], neighbours [{}, {}, {}, {}] against input {} hidden {}",
                io.x.len(),
                io.s_left.len(),
                io.c_left.len(),
                io.s_above.len(),
                io.c_above.len(),
                p.input_dim(),
                d
            ),
        ));
    }
    let mut s = vec![0.0; d];
    let mut c = vec![0.0; d];
    let gates = cell_into(io, p, &mut s, &mut c);
    Ok(CellOutput { s, c, gates })
}

/// Gradients flowing out of one cell's backward pass.
struct CellBackward<'a> {
    dx: &'a mut [f64],
    ds_left: &'a mut [f64],
    dc_left: &'a mut [f64],
    ds_above: &'a mut [f64],
    dc_above: &'a mut [f64],
}

fn cell_backward(
    io: &CellIO<'_>,
    g: &CellGates,
    p: &TwoDLstmParams,
    ds: &[f64],
    dc_in: &[f64],
    grads: &mut TwoDLstmParams,
    out: CellBackward<'_>,
) {
    let d = p.hidden();
    let mut da: [Vec<f64>; 5] = core::array::from_fn(|_| vec![0.0; d]);
    for j in 0..d {
        let i = g.gates[INPUT][j];
        let f = g.gates[FORGET][j];
        let o = g.gates[OUTPUT][j];
        let cand = g.gates[CANDIDATE][j];
        let lambda = g.gates[LAMBDA][j];
        let tc = g.tanh_c[j];
        let mixed = lambda * io.c_left[j] + (1.0 - lambda) * io.c_above[j];

        let dc = dc_in[j] + ds[j] * o * (1.0 - tc * tc);
        let dmixed = dc * f;
        let dlambda = dmixed * (io.c_left[j] - io.c_above[j]);
        out.dc_left[j] += dmixed * lambda;
        out.dc_above[j] += dmixed * (1.0 - lambda);

        da[INPUT][j] = dc * cand * i * (1.0 - i);
        da[FORGET][j] = dc * mixed * f * (1.0 - f);
        da[OUTPUT][j] = ds[j] * tc * o * (1.0 - o);
        da[CANDIDATE][j] = dc * i * (1.0 - cand * cand);
        da[LAMBDA][j] = dlambda * lambda * (1.0 - lambda);
    }
    for k in 0..5 {
        outer_acc(grads.w[k].data_mut(), &da[k], io.x);
        outer_acc(grads.u[k].data_mut(), &da[k], io.s_left);
        outer_acc(grads.v[k].data_mut(), &da[k], io.s_above);
        for (b, a) in grads.b[k].data_mut().iter_mut().zip(&da[k]) {
            *b += a;
        }
        matvec_t_acc(p.w[k].data(), &da[k], out.dx);
        matvec_t_acc(p.u[k].data(), &da[k], out.ds_left);
        matvec_t_acc(p.v[k].data(), &da[k], out.ds_above);
    }
}

/// Hidden and cell states over the `(T'+1) × (N+1)` lattice, boundary
/// included, plus the cached gate activations of every interior cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    cols: usize,
    rows: usize,
    d: usize,
    s: Vec<f64>,
    c: Vec<f64>,
    gates: Vec<CellGates>,
    cell_steps: u64,
}

impl GridState {
    fn empty(cols: usize, rows: usize, d: usize) -> Self {
        let n = (cols + 1) * (rows + 1) * d;
        GridState {
            cols,
            rows,
            d,
            s: vec![0.0; n],
            c: vec![0.0; n],
            gates: vec![CellGates::default(); cols * rows],
            cell_steps: 0,
        }
    }

    #[inline]
    fn offset(&self, t: usize, n: usize) -> usize {
        (t * (self.rows + 1) + n) * self.d
    }

    /// Reduced input length `T'` (horizontal extent).
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of label rows `N`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    /// Cell evaluations performed to build this grid.
    pub fn cell_steps(&self) -> u64 {
        self.cell_steps
    }

    pub fn s(&self, t: usize, n: usize) -> &[f64] {
        let o = self.offset(t, n);
        &self.s[o..o + self.d]
    }

    pub fn c(&self, t: usize, n: usize) -> &[f64] {
        let o = self.offset(t, n);
        &self.c[o..o + self.d]
    }

    pub fn gates(&self, t: usize, n: usize) -> &CellGates {
        &self.gates[(n - 1) * self.cols + (t - 1)]
    }

    /// Drops the per-cell activation cache; the grid can no longer be
    /// differentiated.
    pub fn discard_cache(&mut self) {
        self.gates = Vec::new();
    }

    /// Hidden states of row `n ≥ 1`, as `T' × d`.
    pub fn row_s(&self, n: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.cols * self.d);
        for t in 1..=self.cols {
            data.extend_from_slice(self.s(t, n));
        }
        Tensor::new(&[self.cols, self.d], data).expect("row shape")
    }

    /// `(s, c)` of row `n`; row 0 is the zero boundary.
    pub fn row_state(&self, n: usize) -> RowState {
        let mut s = Vec::with_capacity(self.cols * self.d);
        let mut c = Vec::with_capacity(self.cols * self.d);
        for t in 1..=self.cols {
            s.extend_from_slice(self.s(t, n));
            c.extend_from_slice(self.c(t, n));
        }
        RowState {
            s: Tensor::new(&[self.cols, self.d], s).expect("row shape"),
            c: Tensor::new(&[self.cols, self.d], c).expect("row shape"),
            cell_steps: 0,
        }
    }

    fn eval_cell(&mut self, inputs: &Tensor, t: usize, n: usize, p: &TwoDLstmParams) {
        let d = self.d;
        let x = inputs.slot((t - 1) * self.rows + (n - 1));
        let ol = self.offset(t - 1, n);
        let oa = self.offset(t, n - 1);
        let o = self.offset(t, n);
        let mut s = vec![0.0; d];
        let mut c = vec![0.0; d];
        let io = CellIO {
            x,
            s_left: &self.s[ol..ol + d],
            c_left: &self.c[ol..ol + d],
            s_above: &self.s[oa..oa + d],
            c_above: &self.c[oa..oa + d],
        };
        let g = cell_into(&io, p, &mut s, &mut c);
        self.s[o..o + d].copy_from_slice(&s);
        self.c[o..o + d].copy_from_slice(&c);
        let gi = (n - 1) * self.cols + (t - 1);
        self.gates[gi] = g;
        self.cell_steps += 1;
    }
}

/// Schedules for [`forward_grid_ordered`]; all give identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalOrder {
    /// Row by row, each row left to right (the decoding order).
    RowMajor,
    /// Column by column, each column top to bottom.
    ColumnMajor,
    /// Anti-diagonal wavefronts `t + n = const`.
    Wavefront,
}

fn check_grid_inputs(inputs: &Tensor, p: &TwoDLstmParams) -> Result<(usize, usize)> {
    if inputs.shape().len() != 3 {
        return Err(Error::dim(
            "forward_grid",
            format!("inputs must be T' × N × m, got {:?}", inputs.shape()),
        ));
    }
    let (cols, rows, m) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
    if cols == 0 || rows == 0 {
        return Err(Error::Empty("forward_grid"));
    }
    if m != p.input_dim() {
        return Err(Error::dim(
            "forward_grid",
            format!("input width {m}, cell expects {}", p.input_dim()),
        ));
    }
    Ok((cols, rows))
}

/// Evaluates the whole grid row by row. `inputs` is `T' × N × m`.
pub fn forward_grid(inputs: &Tensor, p: &TwoDLstmParams) -> Result<GridState> {
    forward_grid_ordered(inputs, p, EvalOrder::RowMajor)
}

pub fn forward_grid_ordered(
    inputs: &Tensor,
    p: &TwoDLstmParams,
    order: EvalOrder,
) -> Result<GridState> {
    let (cols, rows) = check_grid_inputs(inputs, p)?;
    let mut grid = GridState::empty(cols, rows, p.hidden());
    match order {
        EvalOrder::RowMajor => {
            for n in 1..=rows {
                for t in 1..=cols {
                    grid.eval_cell(inputs, t, n, p);
                }
            }
        }
        EvalOrder::ColumnMajor => {
            for t in 1..=cols {
                for n in 1..=rows {
                    grid.eval_cell(inputs, t, n, p);
                }
            }
        }
        EvalOrder::Wavefront => {
            for diag in 2..=cols + rows {
                let t_lo = diag.saturating_sub(rows).max(1);
                let t_hi = (diag - 1).min(cols);
                for t in t_lo..=t_hi {
                    grid.eval_cell(inputs, t, diag - t, p);
                }
            }
        }
    }
    Ok(grid)
}

/// One grid row: hidden and cell states for `t = 1..=T'`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowState {
    pub s: Tensor,
    pub c: Tensor,
    /// Cell evaluations spent computing this row.
    pub cell_steps: u64,
}

impl RowState {
    /// The zero boundary row above the first label row.
    pub fn zeros(cols: usize, d: usize) -> Self {
        RowState {
            s: Tensor::zeros(&[cols, d]),
            c: Tensor::zeros(&[cols, d]),
            cell_steps: 0,
        }
    }

    pub fn cols(&self) -> usize {
        self.s.rows()
    }
}

/// Computes the next grid row from the row above it: a left-to-right scan
/// with exactly one cell evaluation per column. `row_inputs` is `T' × m`.
pub fn forward_row(row_inputs: &Tensor, prev: &RowState, p: &TwoDLstmParams) -> Result<RowState> {
    let d = p.hidden();
    let cols = row_inputs.rows();
    if cols == 0 {
        return Err(Error::Empty("forward_row"));
    }
    if prev.s.shape() != [cols, d] || prev.c.shape() != [cols, d] {
        return Err(Error::dim(
            "forward_row",
            format!(
                "previous row {:?} does not match {cols} columns of width {d}",
                prev.s.shape()
            ),
        ));
    }
    if row_inputs.row_len() != p.input_dim() {
        return Err(Error::dim(
            "forward_row",
            format!("input width {}, cell expects {}", row_inputs.row_len(), p.input_dim()),
        ));
    }
    let zero = vec![0.0; d];
    let mut s = vec![0.0; cols * d];
    let mut c = vec![0.0; cols * d];
    let mut steps = 0u64;
    for t in 0..cols {
        let (done_s, rest_s) = s.split_at_mut(t * d);
        let (done_c, rest_c) = c.split_at_mut(t * d);
        let (s_left, c_left) = if t == 0 {
            (&zero[..], &zero[..])
        } else {
            (&done_s[(t - 1) * d..], &done_c[(t - 1) * d..])
        };
        let io = CellIO {
            x: row_inputs.row(t),
            s_left,
            c_left,
            s_above: prev.s.row(t),
            c_above: prev.c.row(t),
        };
        cell_into(&io, p, &mut rest_s[..d], &mut rest_c[..d]);
        steps += 1;
    }
    Ok(RowState {
        s: Tensor::new(&[cols, d], s)?,
        c: Tensor::new(&[cols, d], c)?,
        cell_steps: steps,
    })
}

/// Backpropagation through both grid dimensions, from `(T', N)` back to
/// `(1, 1)`. `ds_upstream` is `T' × N × d` (gradient of the loss w.r.t.
/// every interior hidden state). Accumulates into `grads` and returns the
/// gradient w.r.t. the grid inputs, `T' × N × m`.
pub fn backward_grid(
    grid: &GridState,
    inputs: &Tensor,
    ds_upstream: &Tensor,
    p: &TwoDLstmParams,
    grads: &mut TwoDLstmParams,
) -> Result<Tensor> {
    let (cols, rows) = check_grid_inputs(inputs, p)?;
    let d = p.hidden();
    if grid.cols != cols || grid.rows != rows || grid.d != d {
        return Err(Error::dim("backward_grid", "grid does not match inputs"));
    }
    if ds_upstream.shape() != [cols, rows, d] {
        return Err(Error::dim(
            "backward_grid",
            format!("upstream gradient {:?}, expected [{cols}, {rows}, {d}]", ds_upstream.shape()),
        ));
    }
    if grid.gates.len() != cols * rows {
        return Err(Error::MissingCache("backward_grid"));
    }
    let m = p.input_dim();
    let mut ds_acc = vec![0.0; (cols + 1) * (rows + 1) * d];
    let mut dc_acc = vec![0.0; (cols + 1) * (rows + 1) * d];
    for t in 1..=cols {
        for n in 1..=rows {
            let o = grid.offset(t, n);
            ds_acc[o..o + d].copy_from_slice(ds_upstream.slot((t - 1) * rows + (n - 1)));
        }
    }
    let mut dinputs = Tensor::zeros(&[cols, rows, m]);
    let mut ds_left = vec![0.0; d];
    let mut dc_left = vec![0.0; d];
    let mut ds_above = vec![0.0; d];
    let mut dc_above = vec![0.0; d];
    for n in (1..=rows).rev() {
        for t in (1..=cols).rev() {
            let o = grid.offset(t, n);
            let ol = grid.offset(t - 1, n);
            let oa = grid.offset(t, n - 1);
            let io = CellIO {
                x: inputs.slot((t - 1) * rows + (n - 1)),
                s_left: &grid.s[ol..ol + d],
                c_left: &grid.c[ol..ol + d],
                s_above: &grid.s[oa..oa + d],
                c_above: &grid.c[oa..oa + d],
            };
            for buf in [&mut ds_left, &mut dc_left, &mut ds_above, &mut dc_above] {
                buf.fill(0.0);
            }
            cell_backward(
                &io,
                grid.gates(t, n),
                p,
                &ds_acc[o..o + d],
                &dc_acc[o..o + d],
                grads,
                CellBackward {
                    dx: dinputs.slot_mut((t - 1) * rows + (n - 1)),
                    ds_left: &mut ds_left,
                    dc_left: &mut dc_left,
                    ds_above: &mut ds_above,
                    dc_above: &mut dc_above,
                },
            );
            // boundary cells carry no parameters; their gradients are dropped
            if t > 1 {
                add_into(&mut ds_acc[ol..ol + d], &ds_left);
                add_into(&mut dc_acc[ol..ol + d], &dc_left);
            }
            if n > 1 {
                add_into(&mut ds_acc[oa..oa + d], &ds_above);
                add_into(&mut dc_acc[oa..oa + d], &dc_above);
            }
        }
    }
    Ok(dinputs)
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
