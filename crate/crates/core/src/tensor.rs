//! Dense `f64` tensors and the handful of primitives the model is built from.
//!
//! Everything is row-major. The slice-level kernels (`matvec_acc`,
//! `matvec_t_acc`, `outer_acc`) are what the recurrent layers call in their
//! inner loops; the `Tensor`-level functions wrap them with shape checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::dim("Tensor::new", "zero extent with data"));
        }
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading-axis slot.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// The `i`-th vector along the last axis, treating all leading axes as
    /// one flattened index.
    pub fn slot(&self, i: usize) -> &[f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = value.zeros_like();
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::dim(
                "Parameter::accumulate",
                format!("{}: {:?} vs {:?}", self.name, g.shape(), self.value.shape()),
            ));
        }
        self.grad.add_assign(g);
        Ok(())
    }
}

/// Counter-based deterministic generator (ChaCha8). Identical seeds and
/// stream ids give identical draws on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent generator for sub-task `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the key stream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        // rejection sampling keeps the draw exactly uniform
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.next_u64();
            if v < zone {
                return lo + (v % span) as usize;
            }
        }
    }

    /// Standard normal draw via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out += W x` for a row-major `W` of shape `out.len() × x.len()`.
#[inline]
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `dx += Wᵀ dy` for a row-major `W` of shape `dy.len() × dx.len()`.
#[inline]
pub fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    debug_assert_eq!(w.len(), dy.len() * cols);
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g == 0.0 {
            continue;
        }
        for (d, &wv) in dx.iter_mut().zip(row) {
            *d += g * wv;
        }
    }
}

/// `dW += dy xᵀ`.
#[inline]
pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), dy.len() * cols);
    for (&g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if g == 0.0 {
            continue;
        }
        for (d, &xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

fn check_matrix(op: &'static str, w: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if w.shape() != [rows, cols] {
        return Err(Error::dim(
            op,
            format!("W has shape {:?}, expected [{}, {}]", w.shape(), rows, cols),
        ));
    }
    Ok(())
}

/// `W·x + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = b.len();
    if w.shape().len() != 2 {
        return Err(Error::dim("affine", "W must be a matrix"));
    }
    check_matrix("affine", w, k, x.len()).map_err(|_| {
        Error::dim(
            "affine",
            format!(
                "W {:?} incompatible with x [{}] and b [{}]",
                w.shape(),
                x.len(),
                k
            ),
        )
    })?;
    let mut out = b.data().to_vec();
    matvec_acc(w.data(), x.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

/// Vector-Jacobian product of [`affine`]: returns `(dx, dW, db)`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    check_matrix("affine_backward", w, dy.len(), x.len())?;
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(w.data(), dy.data(), &mut dx);
    let mut dw = w.zeros_like();
    outer_acc(dw.data_mut(), dy.data(), x.data());
    Ok((Tensor::from_vec(dx), dw, dy.clone()))
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh_scalar(v: f64) -> f64 {
    libm::tanh(v)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    map(x, tanh_scalar)
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(y, dy, |s, g| g * s * (1.0 - s))
}

/// Backward of [`tanh_act`] given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(y, dy, |t, g| g * (1.0 - t * t))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Stable log-softmax of a slice into `out`.
pub fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &v in x {
        z += libm::exp(v - m);
    }
    let lz = m + libm::log(z);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lz;
    }
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

/// Backward of [`log_softmax`] given its output `y`: `dx = dy − softmax·Σdy`.
pub fn log_softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let total: f64 = dy.data().iter().sum();
    zip_map(y, dy, |l, g| g - libm::exp(l) * total)
}

/// Glorot-uniform draw in `±sqrt(6 / (fan_in + fan_out))`. A matrix
/// `[rows, cols]` has fan-out `rows` and fan-in `cols`.
pub fn glorot_init(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let (fan_out, fan_in) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    };
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Maximum over the leading (time) axis of a `T×d` tensor, with the winning
/// row per feature. Ties go to the smallest row index.
pub fn max_over_axis(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rows() == 0 {
        return Err(Error::Empty("max_over_axis"));
    }
    let d = x.row_len();
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0usize; d];
    for t in 1..x.rows() {
        for (j, &v) in x.row(t).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = t;
            }
        }
    }
    Ok((Tensor::from_vec(best), arg))
}

/// Routes `dy` back to the winning rows of [`max_over_axis`].
pub fn max_over_axis_backward(argmax: &[usize], dy: &Tensor, rows: usize) -> Tensor {
    let d = argmax.len();
    let mut dx = Tensor::zeros(&[rows, d]);
    for (j, (&t, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        dx.data[t * d + j] += g;
    }
    dx
}
