//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Activations are treated as `[rows, channels]` with channels on the last
//! axis unless a layer says otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul, Scalar, Tensor};
use crate::error::bail;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// A differentiable layer. `forward` caches whatever `backward` needs;
/// `backward` accumulates parameter gradients and returns the input gradient.
pub trait Layer<F: Scalar> {
    fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Result<Tensor<F>>;
    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>>;

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        Vec::new()
    }

    /// Non-trainable state that must be checkpointed (running statistics).
    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(F::zero());
        }
    }
}

fn xavier<F: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = c;
    s
}

fn missing_cache() -> crate::Error {
    crate::Error::Precondition("backward called before forward".into())
}

/// Affine map over the last axis: `y = x W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), xavier(&[c_in, c_out], c_in, c_out, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            input: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Forward without caching.
    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        if x.channels() != c_in || x.ndim() == 0 {
            bail!(Shape, "linear expects {c_in} input channels, got shape {:?}", x.shape());
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * c_out);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        matmul(x.data(), false, self.weight.value.data(), false, &mut out, rows, c_in, c_out, F::one());
        let y = Tensor::from_vec(&with_channels(x.shape(), c_out), out)?;
        y.debug_check_finite("linear output");
        Ok(y)
    }
}

impl<F: Scalar> Layer<F> for Linear<F> {
    fn forward(&mut self, x: Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        let y = self.apply(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let (c_in, c_out) = (self.c_in(), self.c_out());
        let rows = x.rows();
        if dy.len() != rows * c_out {
            bail!(Shape, "linear backward expects {rows}x{c_out} gradient, got {:?}", dy.shape());
        }
        matmul(x.data(), true, dy.data(), false, self.weight.grad.data_mut(), c_in, rows, c_out, F::one());
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks_exact(c_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![F::zero(); rows * c_in];
        matmul(dy.data(), false, self.weight.value.data(), true, &mut dx, rows, c_out, c_in, F::zero());
        Tensor::from_vec(x.shape(), dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over all rows.
///
/// Running statistics follow `r = momentum * r + (1 - momentum) * batch`,
/// except that the first batches are averaged cumulatively (weight
/// `1 / (n + 1)` for the n-th batch) until that weight drops below
/// `1 - momentum`.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    /// Batches folded into the running statistics, as a one-element tensor.
    pub tracked: Tensor<F>,
    name: String,
    xhat: Option<Tensor<F>>,
    inv_std: Vec<F>,
    cached_mode: Mode,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], F::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            tracked: Tensor::zeros(&[1]),
            name: name.to_string(),
            xhat: None,
            inv_std: Vec::new(),
            cached_mode: Mode::Eval,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn eval_inv_std(&self) -> Vec<F> {
        let eps = F::lit(BN_EPS);
        self.running_var.data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect()
    }

    /// Eval-mode forward without caching.
    pub fn apply_eval(&self, mut x: Tensor<F>) -> Result<Tensor<F>> {
        let c = self.channels();
        if x.channels() != c {
            bail!(Shape, "batch norm expects {c} channels, got shape {:?}", x.shape());
        }
        let inv = self.eval_inv_std();
        let (g, b, m) = (self.gamma.value.data(), self.beta.value.data(), self.running_mean.data());
        for row in x.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = g[j] * (row[j] - m[j]) * inv[j] + b[j];
            }
        }
        Ok(x)
    }
}

impl<F: Scalar> Layer<F> for BatchNorm<F> {
    fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let c = self.channels();
        if x.channels() != c {
            bail!(Shape, "batch norm expects {c} channels, got shape {:?}", x.shape());
        }
        let rows = x.rows();
        let mut xhat = x;
        let (mean, inv) = match mode {
            Mode::Train => {
                if rows < 2 {
                    bail!(Argument, "batch norm in train mode needs >= 2 rows, got {rows}");
                }
                let n = F::lit(rows as f64);
                let mut mean = vec![F::zero(); c];
                for row in xhat.data().chunks_exact(c) {
                    for j in 0..c {
                        mean[j] += row[j];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![F::zero(); c];
                for row in xhat.data().chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                let seen = self.tracked.data()[0];
                let mom = F::lit(BN_MOMENTUM).min(seen / (seen + F::one()));
                self.tracked.data_mut()[0] = seen + F::one();
                let unbias = n / (n - F::one());
                let rm = self.running_mean.data_mut();
                for j in 0..c {
                    rm[j] = mom * rm[j] + (F::one() - mom) * mean[j];
                }
                let rv = self.running_var.data_mut();
                for j in 0..c {
                    rv[j] = mom * rv[j] + (F::one() - mom) * var[j] * unbias;
                }
                let eps = F::lit(BN_EPS);
                (mean, var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect::<Vec<_>>())
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.eval_inv_std()),
        };
        for row in xhat.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv[j];
            }
        }
        let mut y = xhat.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for row in y.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        self.xhat = Some(xhat);
        self.inv_std = inv;
        self.cached_mode = mode;
        y.debug_check_finite("batch norm output");
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let xhat = self.xhat.as_ref().ok_or_else(missing_cache)?;
        if dy.shape() != xhat.shape() {
            bail!(Shape, "batch norm backward shape {:?} vs {:?}", dy.shape(), xhat.shape());
        }
        let c = self.channels();
        let rows = xhat.rows();
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for (d, h) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += d[j];
                sum_dy_xhat[j] += d[j] * h[j];
            }
        }
        {
            let gg = self.gamma.grad.data_mut();
            for j in 0..c {
                gg[j] += sum_dy_xhat[j];
            }
            let bg = self.beta.grad.data_mut();
            for j in 0..c {
                bg[j] += sum_dy[j];
            }
        }
        let g = self.gamma.value.data();
        let mut dx = dy.clone();
        match self.cached_mode {
            Mode::Train => {
                let n = F::lit(rows as f64);
                for (d, h) in dx.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)) {
                    for j in 0..c {
                        d[j] = g[j] * self.inv_std[j] / n
                            * (n * d[j] - sum_dy[j] - h[j] * sum_dy_xhat[j]);
                    }
                }
            }
            Mode::Eval => {
                for d in dx.data_mut().chunks_exact_mut(c) {
                    for j in 0..c {
                        d[j] = d[j] * g[j] * self.inv_std[j];
                    }
                }
            }
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
            (format!("{}.tracked", self.name), &mut self.tracked),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn apply<F: Scalar>(mut x: Tensor<F>) -> Tensor<F> {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(F::zero()));
        x
    }
}

impl<F: Scalar> Layer<F> for Relu {
    fn forward(&mut self, mut x: Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        self.active.clear();
        self.active.reserve(x.len());
        for v in x.data_mut() {
            let on = *v > F::zero();
            self.active.push(on);
            if !on {
                *v = F::zero();
            }
        }
        Ok(x)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        if dy.len() != self.active.len() {
            bail!(Shape, "relu backward size {} vs cached {}", dy.len(), self.active.len());
        }
        let mut dx = dy.clone();
        for (d, &on) in dx.data_mut().iter_mut().zip(&self.active) {
            if !on {
                *d = F::zero();
            }
        }
        Ok(dx)
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` in train
/// mode, and eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<F> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            bail!(Argument, "dropout probability must be in [0, 1), got {p}");
        }
        Ok(Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }
}

impl<F: Scalar> Layer<F> for Dropout<F> {
    fn forward(&mut self, mut x: Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x);
        }
        let scale = F::lit(1.0 / (1.0 - self.p));
        let mask: Vec<F> = (0..x.len())
            .map(|_| if self.rng.gen::<f64>() < self.p { F::zero() } else { scale })
            .collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        Ok(x)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let mut dx = dy.clone();
        if let Some(mask) = &self.mask {
            if mask.len() != dx.len() {
                bail!(Shape, "dropout backward size mismatch");
            }
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                *d *= m;
            }
        }
        Ok(dx)
    }
}

/// Max over one axis. Ties go to the lowest index, which alone receives
/// the gradient.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub axis: usize,
    in_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPool {
    pub fn new(axis: usize) -> Self {
        Self {
            axis,
            in_shape: Vec::new(),
            argmax: Vec::new(),
        }
    }

    fn split(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if self.axis >= shape.len() {
            bail!(Argument, "pool axis {} invalid for shape {shape:?}", self.axis);
        }
        let n = shape[self.axis];
        if n == 0 {
            bail!(Argument, "cannot pool over an empty axis");
        }
        Ok((
            shape[..self.axis].iter().product(),
            n,
            shape[self.axis + 1..].iter().product(),
        ))
    }

    fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(self.axis);
        s
    }

    /// Returns the pooled values and the winning index for every output.
    pub fn pool<F: Scalar>(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
        let (outer, n, inner) = self.split(x.shape())?;
        let src = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            let base = o * n * inner;
            let start = out.len();
            out.extend_from_slice(&src[base..base + inner]);
            let (best, arg) = (&mut out[start..], &mut arg[o * inner..(o + 1) * inner]);
            for j in 1..n {
                let row = &src[base + j * inner..base + (j + 1) * inner];
                for i in 0..inner {
                    if row[i] > best[i] {
                        best[i] = row[i];
                        arg[i] = j as u32;
                    }
                }
            }
        }
        Ok((Tensor::from_vec(&self.out_shape(x.shape()), out)?, arg))
    }

    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

impl<F: Scalar> Layer<F> for MaxPool {
    fn forward(&mut self, x: Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        let (y, arg) = self.pool(&x)?;
        self.in_shape = x.shape().to_vec();
        self.argmax = arg;
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        if self.in_shape.is_empty() {
            return Err(missing_cache());
        }
        let (outer, n, inner) = self.split(&self.in_shape)?;
        if dy.len() != outer * inner {
            bail!(Shape, "max pool backward size mismatch");
        }
        let mut dx = Tensor::zeros(&self.in_shape);
        let dxd = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let j = self.argmax[o * inner + i] as usize;
                dxd[(o * n + j) * inner + i] += dy.data()[o * inner + i];
            }
        }
        Ok(dx)
    }
}

/// Source frame for tap `j` of a `kernel`-long window centred on `t`, with
/// replicate padding at both clip ends.
#[inline]
fn tap(t: usize, j: usize, kernel: usize, frames: usize) -> usize {
    let left = (kernel - 1) / 2;
    (t + j).saturating_sub(left).min(frames - 1)
}

/// Convolution over the frame axis of `[patches, frames, C_in]` that mixes
/// all input channels of `kernel` consecutive frames into `C_out` outputs.
/// Frame count is preserved by replicate padding.
#[derive(Debug, Clone)]
pub struct TemporalConv<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub kernel: usize,
    columns: Option<Tensor<F>>,
    in_shape: Vec<usize>,
}

impl<F: Scalar> TemporalConv<F> {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel == 0 {
            bail!(Config, "temporal kernel must be >= 1");
        }
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                xavier(&[kernel * c_in, c_out], kernel * c_in, c_out, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            kernel,
            columns: None,
            in_shape: Vec::new(),
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[0] / self.kernel
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn im2col(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let c_in = self.c_in();
        let &[p, t, c] = x.shape() else {
            bail!(Shape, "temporal conv expects [patches, frames, channels], got {:?}", x.shape());
        };
        if c != c_in {
            bail!(Shape, "temporal conv expects {c_in} channels, got {c}");
        }
        if self.kernel > t {
            bail!(Argument, "temporal kernel {} longer than {t} frames", self.kernel);
        }
        let width = self.kernel * c_in;
        let mut col = Vec::with_capacity(p * t * width);
        let src = x.data();
        for pi in 0..p {
            for ti in 0..t {
                for j in 0..self.kernel {
                    let s = (pi * t + tap(ti, j, self.kernel, t)) * c_in;
                    col.extend_from_slice(&src[s..s + c_in]);
                }
            }
        }
        Tensor::from_vec(&[p * t, width], col)
    }

    fn project(&self, col: &Tensor<F>, p: usize, t: usize) -> Result<Tensor<F>> {
        let c_out = self.c_out();
        let mut out = Vec::with_capacity(p * t * c_out);
        for _ in 0..p * t {
            out.extend_from_slice(self.bias.value.data());
        }
        matmul(col.data(), false, self.weight.value.data(), false, &mut out, p * t, col.channels(), c_out, F::one());
        Tensor::from_vec(&[p, t, c_out], out)
    }

    /// Forward without caching.
    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let col = self.im2col(x)?;
        self.project(&col, x.shape()[0], x.shape()[1])
    }
}

impl<F: Scalar> Layer<F> for TemporalConv<F> {
    fn forward(&mut self, x: Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        let col = self.im2col(&x)?;
        let y = self.project(&col, x.shape()[0], x.shape()[1])?;
        self.columns = Some(col);
        self.in_shape = x.shape().to_vec();
        y.debug_check_finite("temporal conv output");
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let col = self.columns.as_ref().ok_or_else(missing_cache)?;
        let (c_in, c_out) = (self.c_in(), self.c_out());
        let (p, t) = (self.in_shape[0], self.in_shape[1]);
        let rows = p * t;
        if dy.len() != rows * c_out {
            bail!(Shape, "temporal conv backward size mismatch");
        }
        let width = self.kernel * c_in;
        matmul(col.data(), true, dy.data(), false, self.weight.grad.data_mut(), width, rows, c_out, F::one());
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks_exact(c_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dcol = vec![F::zero(); rows * width];
        matmul(dy.data(), false, self.weight.value.data(), true, &mut dcol, rows, c_out, width, F::zero());
        let mut dx = Tensor::zeros(&self.in_shape);
        let dxd = dx.data_mut();
        for pi in 0..p {
            for ti in 0..t {
                let crow = &dcol[(pi * t + ti) * width..(pi * t + ti + 1) * width];
                for j in 0..self.kernel {
                    let d = (pi * t + tap(ti, j, self.kernel, t)) * c_in;
                    for c in 0..c_in {
                        dxd[d + c] += crow[j * c_in + c];
                    }
                }
            }
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel convolution over the frame axis of `[clips, frames, C]`,
/// replicate padded. Weights start as a uniform average.
#[derive(Debug, Clone)]
pub struct DepthwiseTemporalConv<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub kernel: usize,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> DepthwiseTemporalConv<F> {
    pub fn new(name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 {
            bail!(Config, "smoothing kernel must be >= 1");
        }
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::full(&[kernel, channels], F::lit(1.0 / kernel as f64)),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            kernel,
            input: None,
        })
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let c = self.weight.value.shape()[1];
        let &[b, t, xc] = x.shape() else {
            bail!(Shape, "smoothing expects [clips, frames, channels], got {:?}", x.shape());
        };
        if xc != c {
            bail!(Shape, "smoothing expects {c} channels, got {xc}");
        }
        if self.kernel > t {
            bail!(Argument, "smoothing kernel {} longer than {t} frames", self.kernel);
        }
        let (w, bias, src) = (self.weight.value.data(), self.bias.value.data(), x.data());
        let mut out = Vec::with_capacity(x.len());
        for bi in 0..b {
            for ti in 0..t {
                let start = out.len();
                out.extend_from_slice(bias);
                let row = &mut out[start..];
                for j in 0..self.kernel {
                    let s = (bi * t + tap(ti, j, self.kernel, t)) * c;
                    for ci in 0..c {
                        row[ci] += w[j * c + ci] * src[s + ci];
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}

impl<F: Scalar> Layer<F> for DepthwiseTemporalConv<F> {
    fn forward(&mut self, x: Tensor<F>, _mode: Mode) -> Result<Tensor<F>> {
        let y = self.apply(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        if dy.shape() != x.shape() {
            bail!(Shape, "smoothing backward shape mismatch");
        }
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut dx = Tensor::zeros(x.shape());
        let (src, d) = (x.data(), dy.data());
        let w = self.weight.value.data();
        let wg = self.weight.grad.data_mut();
        let dxd = dx.data_mut();
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for j in 0..self.kernel {
                    let s = (bi * t + tap(ti, j, self.kernel, t)) * c;
                    for ci in 0..c {
                        wg[j * c + ci] += d[o + ci] * src[s + ci];
                        dxd[s + ci] += d[o + ci] * w[j * c + ci];
                    }
                }
            }
        }
        let bg = self.bias.grad.data_mut();
        for row in d.chunks_exact(c) {
            for ci in 0..c {
                bg[ci] += row[ci];
            }
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One `Linear -> BatchNorm -> ReLU` block of a shared MLP.
#[derive(Debug, Clone)]
struct MlpBlock<F> {
    linear: Linear<F>,
    norm: Option<BatchNorm<F>>,
    relu: Relu,
}

/// Stack of affine + batch norm + ReLU blocks applied with the same weights
/// at every row (every patch, frame and neighbor position).
#[derive(Debug, Clone)]
pub struct SharedMlp<F> {
    blocks: Vec<MlpBlock<F>>,
}

impl<F: Scalar> SharedMlp<F> {
    pub fn new(name: &str, c_in: usize, widths: &[usize], batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("{name}.{i}");
            blocks.push(MlpBlock {
                linear: Linear::new(&format!("{name}.fc"), c, w, rng),
                norm: batch_norm.then(|| BatchNorm::new(&format!("{name}.bn"), w)),
                relu: Relu::default(),
            });
            c = w;
        }
        Self { blocks }
    }

    pub fn c_out(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.linear.c_out())
    }

    pub fn c_in(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.linear.c_in())
    }

    pub fn linear_mut(&mut self, i: usize) -> &mut Linear<F> {
        &mut self.blocks[i].linear
    }

    /// Eval-mode forward without caching.
    pub fn infer(&self, mut x: Tensor<F>) -> Result<Tensor<F>> {
        for b in &self.blocks {
            x = b.linear.apply(&x)?;
            if let Some(n) = &b.norm {
                x = n.apply_eval(x)?;
            }
            x = Relu::apply(x);
        }
        Ok(x)
    }
}

impl<F: Scalar> Layer<F> for SharedMlp<F> {
    fn forward(&mut self, mut x: Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        for b in &mut self.blocks {
            x = b.linear.forward(x, mode)?;
            if let Some(n) = &mut b.norm {
                x = n.forward(x, mode)?;
            }
            x = b.relu.forward(x, mode)?;
        }
        Ok(x)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.relu.backward(&d)?;
            if let Some(n) = &mut b.norm {
                d = n.backward(&d)?;
            }
            d = b.linear.backward(&d)?;
        }
        Ok(d)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.linear.params_mut());
            if let Some(n) = &mut b.norm {
                v.extend(n.params_mut());
            }
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.blocks
            .iter_mut()
            .filter_map(|b| b.norm.as_mut())
            .flat_map(|n| n.buffers_mut())
            .collect()
    }
}
