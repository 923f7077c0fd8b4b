//! Forward and backward passes for the network's building blocks.
//!
//! Sequence tensors are batch-major `[batch, time, features]`. Recurrent
//! layers switch to time-major storage internally so that each step works on
//! a contiguous `[batch, features]` slab.
//!
//! Every backward function consumes the cache produced by the matching
//! forward call and returns the input gradient together with parameter
//! gradients laid out exactly like the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gemm, gemm_ld, row_moments, sigmoid, softmax_backward_row, softmax_in_place, MatView,
    RngStream, Tensor,
};

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn rank3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::Shape(format!(
            "{what} expects a [batch, time, features] input, got {:?}",
            x.shape()
        ))),
    }
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape(format!(
            "{what}: expected {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_row_bias(m: &mut [f64], bias: &[f64]) {
    let c = bias.len();
    for row in m.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `[b, t, d]` batch-major to `[t, b, d]` time-major, optionally reversing
/// the time axis.
fn to_time_major(x: &[f64], b: usize, t: usize, d: usize, reverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; b * t * d];
    for s in 0..t {
        let src_t = if reverse { t - 1 - s } else { s };
        for i in 0..b {
            let src = (i * t + src_t) * d;
            let dst = (s * b + i) * d;
            out[dst..dst + d].copy_from_slice(&x[src..src + d]);
        }
    }
    out
}

fn from_time_major(x: &[f64], b: usize, t: usize, d: usize, reverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; b * t * d];
    for s in 0..t {
        let dst_t = if reverse { t - 1 - s } else { s };
        for i in 0..b {
            let src = (s * b + i) * d;
            let dst = (i * t + dst_t) * d;
            out[dst..dst + d].copy_from_slice(&x[src..src + d]);
        }
    }
    out
}

pub mod init {
    use super::*;

    /// Glorot/Xavier uniform kernel of shape `[fan_in, fan_out]`.
    pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("sized above")
    }

    /// Matrix with orthonormal rows (or columns, when taller than wide),
    /// built by Gram-Schmidt on Gaussian draws.
    pub fn orthogonal(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
        let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
        while basis.len() < count {
            let mut v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                basis.push(v);
            }
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for (k, v) in basis.iter().enumerate() {
            for (l, &val) in v.iter().enumerate() {
                let (r, c) = if rows <= cols { (k, l) } else { (l, k) };
                out.data_mut()[r * cols + c] = val;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseAct {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[in, out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl DenseParams {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Self {
            w: init::glorot_uniform(fan_in, fan_out, rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn fan_in(&self) -> usize {
        self.w.dim(0)
    }

    pub fn fan_out(&self) -> usize {
        self.w.dim(1)
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input_shape: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    act: DenseAct,
}

/// `act(x·W + b)` applied to the last axis of `x` (any rank ≥ 2).
pub fn dense_forward(p: &DenseParams, x: &Tensor, act: DenseAct) -> Result<(Tensor, DenseCache)> {
    let (fi, fo) = (p.fan_in(), p.fan_out());
    if x.rank() < 2 || x.last_dim() != fi || p.b.len() != fo {
        return Err(Error::Shape(format!(
            "dense {fi}->{fo} applied to input {:?}",
            x.shape()
        )));
    }
    let rows = x.len() / fi;
    let mut y = vec![0.0; rows * fo];
    gemm(MatView::new(x.data(), rows, fi), MatView::new(p.w.data(), fi, fo), &mut y, false);
    add_row_bias(&mut y, p.b.data());
    match act {
        DenseAct::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
        DenseAct::Softmax => y.chunks_mut(fo).for_each(softmax_in_place),
        DenseAct::None => {}
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = fo;
    let out = Tensor::new(shape, y.clone())?;
    let cache = DenseCache {
        input_shape: x.shape().to_vec(),
        x: x.data().to_vec(),
        y,
        act,
    };
    Ok((out, cache))
}

pub fn dense_backward(p: &DenseParams, cache: &DenseCache, dy: &Tensor) -> Result<(Tensor, DenseParams)> {
    let (fi, fo) = (p.fan_in(), p.fan_out());
    if dy.len() != cache.y.len() || dy.last_dim() != fo {
        return Err(Error::Shape(format!("dense backward got gradient {:?}", dy.shape())));
    }
    let rows = cache.y.len() / fo;
    let mut dz = dy.data().to_vec();
    match cache.act {
        DenseAct::Relu => {
            for (g, y) in dz.iter_mut().zip(&cache.y) {
                if *y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        DenseAct::Softmax => {
            for (r, g) in dz.chunks_mut(fo).enumerate() {
                let upstream = g.to_vec();
                softmax_backward_row(&cache.y[r * fo..(r + 1) * fo], &upstream, g);
            }
        }
        DenseAct::None => {}
    }
    let mut dw = Tensor::zeros(&[fi, fo]);
    gemm(MatView::new(&cache.x, rows, fi).t(), MatView::new(&dz, rows, fo), dw.data_mut(), false);
    let db = Tensor::new(vec![fo], col_sums(&dz, fo))?;
    let mut dx = vec![0.0; rows * fi];
    gemm(MatView::new(&dz, rows, fo), MatView::new(p.w.data(), fi, fo).t(), &mut dx, false);
    Ok((Tensor::new(cache.input_shape.clone(), dx)?, DenseParams { w: dw, b: db }))
}

// ---------------------------------------------------------------------------
// GRU

/// Reset-after GRU with separate input and recurrent biases.
/// Gate blocks along the `3n` axis: update `z`, reset `r`, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `[d, 3n]`
    pub w_in: Tensor,
    /// `[n, 3n]`
    pub w_rec: Tensor,
    /// `[3n]`
    pub b_in: Tensor,
    /// `[3n]`
    pub b_rec: Tensor,
}

impl GruParams {
    pub fn init(input: usize, units: usize, rng: &mut RngStream) -> Self {
        Self {
            w_in: init::glorot_uniform(input, 3 * units, rng),
            w_rec: init::orthogonal(units, 3 * units, rng),
            b_in: Tensor::zeros(&[3 * units]),
            b_rec: Tensor::zeros(&[3 * units]),
        }
    }

    pub fn zeros(input: usize, units: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[input, 3 * units]),
            w_rec: Tensor::zeros(&[units, 3 * units]),
            b_in: Tensor::zeros(&[3 * units]),
            b_rec: Tensor::zeros(&[3 * units]),
        }
    }

    pub fn count(input: usize, units: usize) -> usize {
        3 * (input * units + units * units + 2 * units)
    }

    pub fn units(&self) -> usize {
        self.w_rec.dim(0)
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.dim(0)
    }

    fn check(&self, d: usize) -> Result<()> {
        let n = self.units();
        expect_shape(&self.w_in, &[d, 3 * n], "gru input kernel")?;
        expect_shape(&self.w_rec, &[n, 3 * n], "gru recurrent kernel")?;
        expect_shape(&self.b_in, &[3 * n], "gru input bias")?;
        expect_shape(&self.b_rec, &[3 * n], "gru recurrent bias")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn reversed(self) -> bool {
        self == Direction::Backward
    }
}

#[derive(Debug, Clone)]
pub struct GruCache {
    dims: (usize, usize, usize, usize),
    direction: Direction,
    x_tm: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rec_cand: Vec<f64>,
}

/// Runs the GRU over the whole sequence from a zero initial state:
/// `h_t = (1 - z_t)·h_{t-1} + z_t·h̃_t`. The backward-in-time direction
/// reverses the input, runs the same recurrence and reverses the output.
pub fn gru_sequence_forward(p: &GruParams, x: &Tensor, direction: Direction) -> Result<(Tensor, GruCache)> {
    let (b, t, d) = rank3(x, "gru")?;
    p.check(d)?;
    let n = p.units();
    let n3 = 3 * n;
    let x_tm = to_time_major(x.data(), b, t, d, direction.reversed());
    let mut xp = vec![0.0; t * b * n3];
    gemm(MatView::new(&x_tm, t * b, d), MatView::new(p.w_in.data(), d, n3), &mut xp, false);
    add_row_bias(&mut xp, p.b_in.data());

    let size = t * b * n;
    let (mut h_prev, mut z, mut r, mut cand, mut rec_cand) =
        (vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]);
    let mut out = vec![0.0; size];
    let mut h = vec![0.0; b * n];
    let mut hp = vec![0.0; b * n3];
    for s in 0..t {
        gemm(MatView::new(&h, b, n), MatView::new(p.w_rec.data(), n, n3), &mut hp, false);
        add_row_bias(&mut hp, p.b_rec.data());
        let base = s * b * n;
        h_prev[base..base + b * n].copy_from_slice(&h);
        for i in 0..b {
            let xr = &xp[(s * b + i) * n3..(s * b + i + 1) * n3];
            let hr = &hp[i * n3..(i + 1) * n3];
            for j in 0..n {
                let zv = sigmoid(xr[j] + hr[j]);
                let rv = sigmoid(xr[n + j] + hr[n + j]);
                let rec = hr[2 * n + j];
                let cv = (xr[2 * n + j] + rv * rec).tanh();
                let k = base + i * n + j;
                let hv = (1.0 - zv) * h[i * n + j] + zv * cv;
                z[k] = zv;
                r[k] = rv;
                cand[k] = cv;
                rec_cand[k] = rec;
                out[k] = hv;
                h[i * n + j] = hv;
            }
        }
    }
    let y = Tensor::new(vec![b, t, n], from_time_major(&out, b, t, n, direction.reversed()))?;
    let cache = GruCache {
        dims: (b, t, d, n),
        direction,
        x_tm,
        h_prev,
        z,
        r,
        cand,
        rec_cand,
    };
    Ok((y, cache))
}

/// Backpropagation through time over all steps.
pub fn gru_sequence_backward(p: &GruParams, cache: &GruCache, dy: &Tensor) -> Result<(Tensor, GruParams)> {
    let (b, t, d, n) = cache.dims;
    if p.units() != n || p.input_dim() != d {
        return Err(Error::CacheMismatch("gru cache built for different parameters".into()));
    }
    expect_shape(dy, &[b, t, n], "gru output gradient")?;
    let n3 = 3 * n;
    let rev = cache.direction.reversed();
    let dy_tm = to_time_major(dy.data(), b, t, n, rev);
    let mut gx = vec![0.0; t * b * n3];
    let mut gh = vec![0.0; t * b * n3];
    let mut dh = vec![0.0; b * n];
    let mut dh_prev = vec![0.0; b * n];
    for s in (0..t).rev() {
        let base = s * b * n;
        for (g, u) in dh.iter_mut().zip(&dy_tm[base..base + b * n]) {
            *g += u;
        }
        for i in 0..b {
            let row = (s * b + i) * n3;
            for j in 0..n {
                let k = base + i * n + j;
                let (zv, rv, cv) = (cache.z[k], cache.r[k], cache.cand[k]);
                let g = dh[i * n + j];
                let d_cand = g * zv;
                let d_z = g * (cv - cache.h_prev[k]);
                dh_prev[i * n + j] = g * (1.0 - zv);
                let da_cand = d_cand * (1.0 - cv * cv);
                let da_z = d_z * zv * (1.0 - zv);
                let da_r = da_cand * cache.rec_cand[k] * rv * (1.0 - rv);
                gx[row + j] = da_z;
                gx[row + n + j] = da_r;
                gx[row + 2 * n + j] = da_cand;
                gh[row + j] = da_z;
                gh[row + n + j] = da_r;
                gh[row + 2 * n + j] = da_cand * rv;
            }
        }
        let gs = &gh[s * b * n3..(s + 1) * b * n3];
        gemm(MatView::new(gs, b, n3), MatView::new(p.w_rec.data(), n, n3).t(), &mut dh_prev, true);
        std::mem::swap(&mut dh, &mut dh_prev);
    }

    let mut grads = GruParams::zeros(d, n);
    gemm(MatView::new(&cache.x_tm, t * b, d).t(), MatView::new(&gx, t * b, n3), grads.w_in.data_mut(), false);
    gemm(MatView::new(&cache.h_prev, t * b, n).t(), MatView::new(&gh, t * b, n3), grads.w_rec.data_mut(), false);
    grads.b_in.data_mut().copy_from_slice(&col_sums(&gx, n3));
    grads.b_rec.data_mut().copy_from_slice(&col_sums(&gh, n3));
    let mut dx_tm = vec![0.0; t * b * d];
    gemm(MatView::new(&gx, t * b, n3), MatView::new(p.w_in.data(), d, n3).t(), &mut dx_tm, false);
    let dx = Tensor::new(vec![b, t, d], from_time_major(&dx_tm, b, t, d, rev))?;
    Ok((dx, grads))
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    fwd: GruCache,
    bwd: GruCache,
}

fn concat_seq(a: &Tensor, c: &Tensor) -> Tensor {
    let (p, q) = (a.last_dim(), c.last_dim());
    let rows = a.len() / p.max(1);
    let mut out = Vec::with_capacity(a.len() + c.len());
    for i in 0..rows {
        out.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
        out.extend_from_slice(&c.data()[i * q..(i + 1) * q]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = p + q;
    Tensor::new(shape, out).expect("sized above")
}

fn split_last(x: &Tensor, p: usize) -> (Tensor, Tensor) {
    let w = x.last_dim();
    let q = w - p;
    let rows = x.len() / w.max(1);
    let mut a = Vec::with_capacity(rows * p);
    let mut c = Vec::with_capacity(rows * q);
    for row in x.data().chunks(w) {
        a.extend_from_slice(&row[..p]);
        c.extend_from_slice(&row[p..]);
    }
    let mut sa = x.shape().to_vec();
    let mut sc = x.shape().to_vec();
    *sa.last_mut().expect("non-scalar") = p;
    *sc.last_mut().expect("non-scalar") = q;
    (Tensor::new(sa, a).expect("sized"), Tensor::new(sc, c).expect("sized"))
}

/// Output is `[forward ∥ backward]` along the last axis, width `2n`.
pub fn bigru_forward(p_fwd: &GruParams, p_bwd: &GruParams, x: &Tensor) -> Result<(Tensor, BiGruCache)> {
    if p_fwd.w_in.shape() != p_bwd.w_in.shape() || p_fwd.w_rec.shape() != p_bwd.w_rec.shape() {
        return Err(Error::Shape(format!(
            "bigru directions disagree: {:?}/{:?} vs {:?}/{:?}",
            p_fwd.w_in.shape(),
            p_fwd.w_rec.shape(),
            p_bwd.w_in.shape(),
            p_bwd.w_rec.shape()
        )));
    }
    let (yf, fwd) = gru_sequence_forward(p_fwd, x, Direction::Forward)?;
    let (yb, bwd) = gru_sequence_forward(p_bwd, x, Direction::Backward)?;
    Ok((concat_seq(&yf, &yb), BiGruCache { fwd, bwd }))
}

pub fn bigru_backward(
    p_fwd: &GruParams,
    p_bwd: &GruParams,
    cache: &BiGruCache,
    dy: &Tensor,
) -> Result<(Tensor, GruParams, GruParams)> {
    let n = p_fwd.units();
    if dy.last_dim() != 2 * n {
        return Err(Error::Shape(format!("bigru gradient {:?}", dy.shape())));
    }
    let (df, db) = split_last(dy, n);
    let (mut dx, gf) = gru_sequence_backward(p_fwd, &cache.fwd, &df)?;
    let (dxb, gb) = gru_sequence_backward(p_bwd, &cache.bwd, &db)?;
    dx.add_assign(&dxb)?;
    Ok((dx, gf, gb))
}

// ---------------------------------------------------------------------------
// LSTM

/// LSTM with gate blocks `[input, forget, candidate, output]` along `4n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[d, 4n]`
    pub w_in: Tensor,
    /// `[n, 4n]`
    pub w_rec: Tensor,
    /// `[4n]`
    pub b: Tensor,
}

impl LstmParams {
    /// `forget_bias` seeds the forget-gate block of the bias (0 or 1 in
    /// practice).
    pub fn init(input: usize, units: usize, forget_bias: f64, rng: &mut RngStream) -> Self {
        let mut b = Tensor::zeros(&[4 * units]);
        b.data_mut()[units..2 * units].fill(forget_bias);
        Self {
            w_in: init::glorot_uniform(input, 4 * units, rng),
            w_rec: init::orthogonal(units, 4 * units, rng),
            b,
        }
    }

    pub fn zeros(input: usize, units: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[input, 4 * units]),
            w_rec: Tensor::zeros(&[units, 4 * units]),
            b: Tensor::zeros(&[4 * units]),
        }
    }

    pub fn count(input: usize, units: usize) -> usize {
        4 * (input * units + units * units + units)
    }

    pub fn units(&self) -> usize {
        self.w_rec.dim(0)
    }

    fn check(&self, d: usize) -> Result<()> {
        let n = self.units();
        expect_shape(&self.w_in, &[d, 4 * n], "lstm input kernel")?;
        expect_shape(&self.w_rec, &[n, 4 * n], "lstm recurrent kernel")?;
        expect_shape(&self.b, &[4 * n], "lstm bias")
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    dims: (usize, usize, usize, usize),
    return_sequences: bool,
    x_tm: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Runs the LSTM from zero states. Returns `[b, n]` (last state) or, with
/// `return_sequences`, `[b, T, n]`.
pub fn lstm_forward(p: &LstmParams, x: &Tensor, return_sequences: bool) -> Result<(Tensor, LstmCache)> {
    let (b, t, d) = rank3(x, "lstm")?;
    p.check(d)?;
    let n = p.units();
    let n4 = 4 * n;
    let x_tm = to_time_major(x.data(), b, t, d, false);
    let mut xp = vec![0.0; t * b * n4];
    gemm(MatView::new(&x_tm, t * b, d), MatView::new(p.w_in.data(), d, n4), &mut xp, false);
    add_row_bias(&mut xp, p.b.data());

    let size = t * b * n;
    let mut h_prev = vec![0.0; size];
    let mut c_prev = vec![0.0; size];
    let mut tanh_c = vec![0.0; size];
    let mut out = vec![0.0; size];
    let mut gates = vec![0.0; t * b * n4];
    let mut h = vec![0.0; b * n];
    let mut c = vec![0.0; b * n];
    let mut hp = vec![0.0; b * n4];
    for s in 0..t {
        gemm(MatView::new(&h, b, n), MatView::new(p.w_rec.data(), n, n4), &mut hp, false);
        let base = s * b * n;
        h_prev[base..base + b * n].copy_from_slice(&h);
        c_prev[base..base + b * n].copy_from_slice(&c);
        for i in 0..b {
            let row = (s * b + i) * n4;
            for j in 0..n {
                let a = |g: usize| xp[row + g * n + j] + hp[i * n4 + g * n + j];
                let ig = sigmoid(a(0));
                let fg = sigmoid(a(1));
                let gg = a(2).tanh();
                let og = sigmoid(a(3));
                let cv = fg * c[i * n + j] + ig * gg;
                let tc = cv.tanh();
                let hv = og * tc;
                gates[row + j] = ig;
                gates[row + n + j] = fg;
                gates[row + 2 * n + j] = gg;
                gates[row + 3 * n + j] = og;
                let k = base + i * n + j;
                tanh_c[k] = tc;
                out[k] = hv;
                c[i * n + j] = cv;
                h[i * n + j] = hv;
            }
        }
    }
    let y = if return_sequences {
        Tensor::new(vec![b, t, n], from_time_major(&out, b, t, n, false))?
    } else {
        Tensor::new(vec![b, n], h)?
    };
    let cache = LstmCache {
        dims: (b, t, d, n),
        return_sequences,
        x_tm,
        h_prev,
        c_prev,
        gates,
        tanh_c,
    };
    Ok((y, cache))
}

/// Last-state LSTM as used by the second branch.
pub fn lstm_last_forward(p: &LstmParams, x: &Tensor) -> Result<(Tensor, LstmCache)> {
    lstm_forward(p, x, false)
}

pub fn lstm_backward(p: &LstmParams, cache: &LstmCache, dy: &Tensor) -> Result<(Tensor, LstmParams)> {
    let (b, t, d, n) = cache.dims;
    if p.units() != n || p.w_in.dim(0) != d {
        return Err(Error::CacheMismatch("lstm cache built for different parameters".into()));
    }
    let n4 = 4 * n;
    let dy_tm = if cache.return_sequences {
        expect_shape(dy, &[b, t, n], "lstm output gradient")?;
        Some(to_time_major(dy.data(), b, t, n, false))
    } else {
        expect_shape(dy, &[b, n], "lstm output gradient")?;
        None
    };
    let mut ga = vec![0.0; t * b * n4];
    let mut dh = vec![0.0; b * n];
    let mut dh_prev = vec![0.0; b * n];
    let mut dc = vec![0.0; b * n];
    for s in (0..t).rev() {
        let base = s * b * n;
        match &dy_tm {
            Some(seq) => dh.iter_mut().zip(&seq[base..base + b * n]).for_each(|(g, u)| *g += u),
            None if s == t - 1 => dh.iter_mut().zip(dy.data()).for_each(|(g, u)| *g += u),
            None => {}
        }
        for i in 0..b {
            let row = (s * b + i) * n4;
            for j in 0..n {
                let k = base + i * n + j;
                let ig = cache.gates[row + j];
                let fg = cache.gates[row + n + j];
                let gg = cache.gates[row + 2 * n + j];
                let og = cache.gates[row + 3 * n + j];
                let tc = cache.tanh_c[k];
                let g = dh[i * n + j];
                let d_o = g * tc;
                let dcv = dc[i * n + j] + g * og * (1.0 - tc * tc);
                ga[row + j] = dcv * gg * ig * (1.0 - ig);
                ga[row + n + j] = dcv * cache.c_prev[k] * fg * (1.0 - fg);
                ga[row + 2 * n + j] = dcv * ig * (1.0 - gg * gg);
                ga[row + 3 * n + j] = d_o * og * (1.0 - og);
                dc[i * n + j] = dcv * fg;
            }
        }
        let gs = &ga[s * b * n4..(s + 1) * b * n4];
        gemm(MatView::new(gs, b, n4), MatView::new(p.w_rec.data(), n, n4).t(), &mut dh_prev, false);
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    let mut grads = LstmParams::zeros(d, n);
    gemm(MatView::new(&cache.x_tm, t * b, d).t(), MatView::new(&ga, t * b, n4), grads.w_in.data_mut(), false);
    gemm(MatView::new(&cache.h_prev, t * b, n).t(), MatView::new(&ga, t * b, n4), grads.w_rec.data_mut(), false);
    grads.b.data_mut().copy_from_slice(&col_sums(&ga, n4));
    let mut dx_tm = vec![0.0; t * b * d];
    gemm(MatView::new(&ga, t * b, n4), MatView::new(p.w_in.data(), d, n4).t(), &mut dx_tm, false);
    let dx = Tensor::new(vec![b, t, d], from_time_major(&dx_tm, b, t, d, false))?;
    Ok((dx, grads))
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    /// `[d_model, h·d_k]`
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    /// `[h·d_k, d_model]`
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhaParams {
    pub fn init(d_model: usize, heads: usize, key_dim: usize, rng: &mut RngStream) -> Self {
        let hk = heads * key_dim;
        Self {
            wq: init::glorot_uniform(d_model, hk, rng),
            bq: Tensor::zeros(&[hk]),
            wk: init::glorot_uniform(d_model, hk, rng),
            bk: Tensor::zeros(&[hk]),
            wv: init::glorot_uniform(d_model, hk, rng),
            bv: Tensor::zeros(&[hk]),
            wo: init::glorot_uniform(hk, d_model, rng),
            bo: Tensor::zeros(&[d_model]),
        }
    }

    pub fn zeros(d_model: usize, heads: usize, key_dim: usize) -> Self {
        let hk = heads * key_dim;
        Self {
            wq: Tensor::zeros(&[d_model, hk]),
            bq: Tensor::zeros(&[hk]),
            wk: Tensor::zeros(&[d_model, hk]),
            bk: Tensor::zeros(&[hk]),
            wv: Tensor::zeros(&[d_model, hk]),
            bv: Tensor::zeros(&[hk]),
            wo: Tensor::zeros(&[hk, d_model]),
            bo: Tensor::zeros(&[d_model]),
        }
    }

    pub fn count(d_model: usize, heads: usize, key_dim: usize) -> usize {
        let hk = heads * key_dim;
        3 * (d_model * hk + hk) + hk * d_model + d_model
    }

    fn check(&self, d_model: usize, hk: usize) -> Result<()> {
        for (w, b, name) in [(&self.wq, &self.bq, "query"), (&self.wk, &self.bk, "key"), (&self.wv, &self.bv, "value")] {
            expect_shape(w, &[d_model, hk], name)?;
            expect_shape(b, &[hk], name)?;
        }
        expect_shape(&self.wo, &[hk, d_model], "attention output kernel")?;
        expect_shape(&self.bo, &[d_model], "attention output bias")
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    dims: (usize, usize, usize, usize, usize),
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    concat: Vec<f64>,
}

impl MhaCache {
    /// Attention weights `[batch, heads, T, T]`.
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }
}

fn project(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (fi, fo) = (w.dim(0), w.dim(1));
    let mut out = vec![0.0; rows * fo];
    gemm(MatView::new(x, rows, fi), MatView::new(w.data(), fi, fo), &mut out, false);
    add_row_bias(&mut out, b.data());
    out
}

/// Self-attention with query = key = value = `x`; no mask.
pub fn mha_self_forward(p: &MhaParams, x: &Tensor, heads: usize, key_dim: usize) -> Result<(Tensor, MhaCache)> {
    let (b, t, dm) = rank3(x, "attention")?;
    let hk = heads * key_dim;
    p.check(dm, hk)?;
    let rows = b * t;
    let q = project(x.data(), rows, &p.wq, &p.bq);
    let k = project(x.data(), rows, &p.wk, &p.bk);
    let v = project(x.data(), rows, &p.wv, &p.bv);
    let scale = 1.0 / (key_dim as f64).sqrt();
    let mut attn = vec![0.0; b * heads * t * t];
    let mut concat = vec![0.0; rows * hk];
    for i in 0..b {
        for h in 0..heads {
            let off = i * t * hk + h * key_dim;
            let a = &mut attn[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
            gemm(
                MatView::strided(&q[off..], t, key_dim, hk),
                MatView::strided(&k[off..], t, key_dim, hk).t(),
                a,
                false,
            );
            for row in a.chunks_mut(t) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm_ld(
                MatView::new(a, t, t),
                MatView::strided(&v[off..], t, key_dim, hk),
                &mut concat[off..],
                hk,
                false,
            );
        }
    }
    let y = project(&concat, rows, &p.wo, &p.bo);
    let cache = MhaCache {
        dims: (b, t, dm, heads, key_dim),
        x: x.data().to_vec(),
        q,
        k,
        v,
        attn,
        concat,
    };
    Ok((Tensor::new(vec![b, t, dm], y)?, cache))
}

pub fn mha_self_backward(p: &MhaParams, cache: &MhaCache, dy: &Tensor) -> Result<(Tensor, MhaParams)> {
    let (b, t, dm, heads, key_dim) = cache.dims;
    let hk = heads * key_dim;
    if p.wq.shape() != [dm, hk] {
        return Err(Error::CacheMismatch("attention cache built for different parameters".into()));
    }
    expect_shape(dy, &[b, t, dm], "attention output gradient")?;
    let rows = b * t;
    let scale = 1.0 / (key_dim as f64).sqrt();
    let mut g = MhaParams::zeros(dm, heads, key_dim);

    gemm(MatView::new(&cache.concat, rows, hk).t(), MatView::new(dy.data(), rows, dm), g.wo.data_mut(), false);
    g.bo.data_mut().copy_from_slice(&col_sums(dy.data(), dm));
    let mut dcat = vec![0.0; rows * hk];
    gemm(MatView::new(dy.data(), rows, dm), MatView::new(p.wo.data(), hk, dm).t(), &mut dcat, false);

    let mut dq = vec![0.0; rows * hk];
    let mut dk = vec![0.0; rows * hk];
    let mut dv = vec![0.0; rows * hk];
    let mut da = vec![0.0; t * t];
    for i in 0..b {
        for h in 0..heads {
            let off = i * t * hk + h * key_dim;
            let a = &cache.attn[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
            let d_out = MatView::strided(&dcat[off..], t, key_dim, hk);
            gemm(d_out, MatView::strided(&cache.v[off..], t, key_dim, hk).t(), &mut da, false);
            gemm_ld(MatView::new(a, t, t).t(), d_out, &mut dv[off..], hk, false);
            for (arow, drow) in a.chunks(t).zip(da.chunks_mut(t)) {
                let upstream = drow.to_vec();
                softmax_backward_row(arow, &upstream, drow);
                drow.iter_mut().for_each(|v| *v *= scale);
            }
            gemm_ld(
                MatView::new(&da, t, t),
                MatView::strided(&cache.k[off..], t, key_dim, hk),
                &mut dq[off..],
                hk,
                false,
            );
            gemm_ld(
                MatView::new(&da, t, t).t(),
                MatView::strided(&cache.q[off..], t, key_dim, hk),
                &mut dk[off..],
                hk,
                false,
            );
        }
    }

    let mut dx = vec![0.0; rows * dm];
    for (dproj, w, gw, gb) in [
        (&dq, &p.wq, &mut g.wq, &mut g.bq),
        (&dk, &p.wk, &mut g.wk, &mut g.bk),
        (&dv, &p.wv, &mut g.wv, &mut g.bv),
    ] {
        gemm(MatView::new(&cache.x, rows, dm).t(), MatView::new(dproj, rows, hk), gw.data_mut(), false);
        gb.data_mut().copy_from_slice(&col_sums(dproj, hk));
        gemm(MatView::new(dproj, rows, hk), MatView::new(w.data(), dm, hk).t(), &mut dx, true);
    }
    Ok((Tensor::new(vec![b, t, dm], dx)?, g))
}

// ---------------------------------------------------------------------------
// Layer normalization

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn count(d: usize) -> usize {
        2 * d
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub fn layer_norm_forward(p: &LayerNormParams, x: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if d == 0 || p.gamma.len() != d || p.beta.len() != d {
        return Err(Error::Shape(format!(
            "layer norm over width {} applied to {:?}",
            p.gamma.len(),
            x.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.len() / d;
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; x.len()];
    for (r, row) in x.data().chunks(d).enumerate() {
        let (mean, is) = row_moments(row, eps);
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            x_hat[r * d + j] = xh;
            y[r * d + j] = p.gamma.data()[j] * xh + p.beta.data()[j];
        }
    }
    let cache = LayerNormCache {
        shape: x.shape().to_vec(),
        x_hat,
        inv_std,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

pub fn layer_norm_backward(p: &LayerNormParams, cache: &LayerNormCache, dy: &Tensor) -> Result<(Tensor, LayerNormParams)> {
    expect_shape(dy, &cache.shape, "layer norm output gradient")?;
    let d = p.gamma.len();
    let mut g = LayerNormParams {
        gamma: Tensor::zeros(&[d]),
        beta: Tensor::zeros(&[d]),
    };
    let mut dx = vec![0.0; dy.len()];
    let mut dxh = vec![0.0; d];
    for (r, grow) in dy.data().chunks(d).enumerate() {
        let xh = &cache.x_hat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            g.gamma.data_mut()[j] += grow[j] * xh[j];
            g.beta.data_mut()[j] += grow[j];
            dxh[j] = grow[j] * p.gamma.data()[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, g))
}

// ---------------------------------------------------------------------------
// Dropout, flatten, concatenate

/// Per-element multipliers kept from a training-mode dropout pass; `None` for
/// an identity pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn multipliers(&self) -> Option<&[f64]> {
        self.0.as_deref()
    }
}

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`. Evaluation is identity.
pub fn dropout_apply(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let rng = rng.ok_or_else(|| Error::Config("training-mode dropout needs a random stream".into()))?;
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Ok((y, DropoutMask(Some(mask))))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor) -> Result<Tensor> {
    match &mask.0 {
        None => Ok(dy.clone()),
        Some(m) if m.len() == dy.len() => {
            let mut g = dy.clone();
            g.data_mut().iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            Ok(g)
        }
        Some(m) => Err(Error::Shape(format!(
            "dropout mask of {} elements vs gradient {:?}",
            m.len(),
            dy.shape()
        ))),
    }
}

/// `[b, T, c]` to `[b, T·c]`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let (b, t, c) = rank3(x, "flatten")?;
    x.clone().reshape(&[b, t * c])
}

/// Last-axis concatenation of two `[b, ·]` tensors, `a` first.
pub fn concat_last(a: &Tensor, c: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || c.rank() != 2 || a.dim(0) != c.dim(0) {
        return Err(Error::Shape(format!(
            "concatenate {:?} with {:?}",
            a.shape(),
            c.shape()
        )));
    }
    Ok(concat_seq(a, c))
}

/// Splits a last-axis concatenation back into parts of the given widths.
pub fn split_last_axis(x: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    if widths.iter().sum::<usize>() != x.last_dim() {
        return Err(Error::Shape(format!(
            "cannot split {:?} into widths {widths:?}",
            x.shape()
        )));
    }
    let mut parts = Vec::with_capacity(widths.len());
    let mut rest = x.clone();
    for (i, &w) in widths.iter().enumerate() {
        if i + 1 == widths.len() {
            parts.push(rest);
            break;
        }
        let (head, tail) = split_last(&rest, w);
        parts.push(head);
        rest = tail;
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Uniform dispatch

/// A parameterized block, as assembled by the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Applied to the last axis, so it also serves as a per-time-step
    /// projection on sequences.
    Dense { params: DenseParams, act: DenseAct },
    BiGru { fwd: GruParams, bwd: GruParams },
    Lstm { params: LstmParams, return_sequences: bool },
    Mha { params: MhaParams, heads: usize, key_dim: usize },
    LayerNorm { params: LayerNormParams, eps: f64 },
    Dropout { rate: f64 },
    Flatten,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense(DenseCache),
    BiGru(BiGruCache),
    Lstm(LstmCache),
    Mha(MhaCache),
    LayerNorm(LayerNormCache),
    Dropout(DropoutMask),
    Flatten(Vec<usize>),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "Dense",
            Layer::BiGru { .. } => "BiGRU",
            Layer::Lstm { .. } => "LSTM",
            Layer::Mha { .. } => "MHA",
            Layer::LayerNorm { .. } => "LayerNorm",
            Layer::Dropout { .. } => "Dropout",
            Layer::Flatten => "Flatten",
        }
    }

    /// Parameter tensors with local names, in serialization order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense { params, .. } => vec![("w", &params.w), ("b", &params.b)],
            Layer::BiGru { fwd, bwd } => vec![
                ("fwd.w_in", &fwd.w_in),
                ("fwd.w_rec", &fwd.w_rec),
                ("fwd.b_in", &fwd.b_in),
                ("fwd.b_rec", &fwd.b_rec),
                ("bwd.w_in", &bwd.w_in),
                ("bwd.w_rec", &bwd.w_rec),
                ("bwd.b_in", &bwd.b_in),
                ("bwd.b_rec", &bwd.b_rec),
            ],
            Layer::Lstm { params, .. } => {
                vec![("w_in", &params.w_in), ("w_rec", &params.w_rec), ("b", &params.b)]
            }
            Layer::Mha { params, .. } => vec![
                ("wq", &params.wq),
                ("bq", &params.bq),
                ("wk", &params.wk),
                ("bk", &params.bk),
                ("wv", &params.wv),
                ("bv", &params.bv),
                ("wo", &params.wo),
                ("bo", &params.bo),
            ],
            Layer::LayerNorm { params, .. } => vec![("gamma", &params.gamma), ("beta", &params.beta)],
            Layer::Dropout { .. } | Layer::Flatten => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { params, .. } => vec![&mut params.w, &mut params.b],
            Layer::BiGru { fwd, bwd } => vec![
                &mut fwd.w_in,
                &mut fwd.w_rec,
                &mut fwd.b_in,
                &mut fwd.b_rec,
                &mut bwd.w_in,
                &mut bwd.w_rec,
                &mut bwd.b_in,
                &mut bwd.b_rec,
            ],
            Layer::Lstm { params, .. } => vec![&mut params.w_in, &mut params.w_rec, &mut params.b],
            Layer::Mha { params, .. } => vec![
                &mut params.wq,
                &mut params.bq,
                &mut params.wk,
                &mut params.bk,
                &mut params.wv,
                &mut params.bv,
                &mut params.wo,
                &mut params.bo,
            ],
            Layer::LayerNorm { params, .. } => vec![&mut params.gamma, &mut params.beta],
            Layer::Dropout { .. } | Layer::Flatten => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// `rng` is required only for training-mode dropout.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: Option<&mut RngStream>) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Dense { params, act } => {
                let (y, c) = dense_forward(params, x, *act)?;
                (y, LayerCache::Dense(c))
            }
            Layer::BiGru { fwd, bwd } => {
                let (y, c) = bigru_forward(fwd, bwd, x)?;
                (y, LayerCache::BiGru(c))
            }
            Layer::Lstm { params, return_sequences } => {
                let (y, c) = lstm_forward(params, x, *return_sequences)?;
                (y, LayerCache::Lstm(c))
            }
            Layer::Mha { params, heads, key_dim } => {
                let (y, c) = mha_self_forward(params, x, *heads, *key_dim)?;
                (y, LayerCache::Mha(c))
            }
            Layer::LayerNorm { params, eps } => {
                let (y, c) = layer_norm_forward(params, x, *eps)?;
                (y, LayerCache::LayerNorm(c))
            }
            Layer::Dropout { rate } => {
                let (y, m) = dropout_apply(x, *rate, mode, rng)?;
                (y, LayerCache::Dropout(m))
            }
            Layer::Flatten => (flatten(x)?, LayerCache::Flatten(x.shape().to_vec())),
        })
    }

    /// Returns the input gradient and parameter gradients ordered as
    /// [`Layer::params`].
    pub fn backward(&self, cache: &LayerCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(match (self, cache) {
            (Layer::Dense { params, .. }, LayerCache::Dense(c)) => {
                let (dx, g) = dense_backward(params, c, dy)?;
                (dx, vec![g.w, g.b])
            }
            (Layer::BiGru { fwd, bwd }, LayerCache::BiGru(c)) => {
                let (dx, gf, gb) = bigru_backward(fwd, bwd, c, dy)?;
                (dx, vec![gf.w_in, gf.w_rec, gf.b_in, gf.b_rec, gb.w_in, gb.w_rec, gb.b_in, gb.b_rec])
            }
            (Layer::Lstm { params, .. }, LayerCache::Lstm(c)) => {
                let (dx, g) = lstm_backward(params, c, dy)?;
                (dx, vec![g.w_in, g.w_rec, g.b])
            }
            (Layer::Mha { params, .. }, LayerCache::Mha(c)) => {
                let (dx, g) = mha_self_backward(params, c, dy)?;
                (dx, vec![g.wq, g.bq, g.wk, g.bk, g.wv, g.bv, g.wo, g.bo])
            }
            (Layer::LayerNorm { params, .. }, LayerCache::LayerNorm(c)) => {
                let (dx, g) = layer_norm_backward(params, c, dy)?;
                (dx, vec![g.gamma, g.beta])
            }
            (Layer::Dropout { .. }, LayerCache::Dropout(m)) => (dropout_backward(m, dy)?, vec![]),
            (Layer::Flatten, LayerCache::Flatten(shape)) => (dy.clone().reshape(shape)?, vec![]),
            (layer, _) => {
                return Err(Error::CacheMismatch(format!(
                    "{} layer given a cache from another layer kind",
                    layer.kind()
                )))
            }
        })
    }
}
