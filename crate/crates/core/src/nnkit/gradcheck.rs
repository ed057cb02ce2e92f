//! Central finite-difference verification of hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Mode};
use super::tensor::Tensor;
use crate::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms; it sits well
/// above the round-off of a central difference at [`STEP`] for objectives of order 10.
pub const ABS_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over input gradients.
    pub input: f64,
    /// Worst relative error over parameter gradients.
    pub params: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.input.max(self.params)
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Checks a layer on a random input of `shape` drawn from [-1, 1).
pub fn grad_check<L: Layer<f64>>(layer: &mut L, shape: &[usize], mode: Mode, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(shape, -1.0, 1.0, &mut rng);
    grad_check_input(layer, &input, mode, seed)
}

/// Compares analytic input and parameter gradients of `L = sum(r * layer(x))`
/// for a fixed random `r` against central differences. The layer must be
/// deterministic in `mode` (no active dropout).
pub fn grad_check_input<L: Layer<f64>>(
    layer: &mut L,
    input: &Tensor<f64>,
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let probe = layer.forward(input.clone(), mode)?;
    let r = random_tensor(probe.shape(), -1.0, 1.0, &mut rng);
    let objective = |layer: &mut L, x: &Tensor<f64>| -> Result<f64> {
        let y = layer.forward(x.clone(), mode)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    layer.zero_grad();
    layer.forward(input.clone(), mode)?;
    let dx = layer.backward(&r)?;
    let analytic_params: Vec<Vec<f64>> = layer.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut x = input.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = objective(layer, &x)?;
        x.data_mut()[i] = orig - STEP;
        let down = objective(layer, &x)?;
        x.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    let input_err = max_relative_error(dx.data(), &numeric);

    let mut param_err: f64 = 0.0;
    let mut checked = numeric.len();
    for (pi, analytic) in analytic_params.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = layer.params_mut()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = orig + STEP;
            let up = objective(layer, input)?;
            layer.params_mut()[pi].value.data_mut()[j] = orig - STEP;
            let down = objective(layer, input)?;
            layer.params_mut()[pi].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        checked += numeric.len();
        param_err = param_err.max(max_relative_error(analytic, &numeric));
    }
    Ok(GradCheckReport {
        input: input_err,
        params: param_err,
        checked,
    })
}

/// Checks every layer type on small random 64-bit inputs; ReLU and max
/// pooling inputs are kept away from kinks and ties.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::layers::{BatchNorm, DepthwiseTemporalConv, Linear, MaxPool, Relu, SharedMlp, TemporalConv};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(1);
        s
    };

    let mut fc = Linear::<f64>::new("fc", 5, 4, &mut rng);
    out.push(("linear", grad_check(&mut fc, &[3, 2, 5], Mode::Train, next())?));

    let mut x = random_tensor(&[40], -1.0, 1.0, &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v = v.signum() * v.abs().max(0.05));
    out.push(("relu", grad_check_input(&mut Relu::default(), &x, Mode::Train, next())?));

    let mut bn = BatchNorm::<f64>::new("bn", 3);
    bn.gamma.value = random_tensor(&[3], 0.5, 1.5, &mut rng);
    bn.beta.value = random_tensor(&[3], -0.5, 0.5, &mut rng);
    out.push(("batch_norm.train", grad_check(&mut bn, &[8, 3], Mode::Train, next())?));
    out.push(("batch_norm.eval", grad_check(&mut bn, &[8, 3], Mode::Eval, next())?));

    let mut mlp = SharedMlp::<f64>::new("mlp", 3, &[4, 5], true, &mut rng);
    out.push(("shared_mlp", grad_check(&mut mlp, &[2, 3, 4, 3], Mode::Train, next())?));

    // Distinct values a fixed gap apart so a step of STEP never flips the max.
    let n = 3 * 5 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_vec(&[3, 5, 4], vals)?;
    out.push(("max_pool", grad_check_input(&mut MaxPool::new(1), &x, Mode::Train, next())?));

    let mut tc = TemporalConv::<f64>::new("tconv", 3, 4, 3, &mut rng)?;
    out.push(("temporal_conv", grad_check(&mut tc, &[2, 5, 3], Mode::Train, next())?));
    let mut tc = TemporalConv::<f64>::new("tconv", 2, 2, 4, &mut rng)?;
    out.push(("temporal_conv.even", grad_check(&mut tc, &[3, 4, 2], Mode::Train, next())?));

    let mut dw = DepthwiseTemporalConv::<f64>::new("smooth", 3, 4)?;
    dw.weight.value = random_tensor(&[4, 3], -1.0, 1.0, &mut rng);
    out.push(("depthwise_conv", grad_check(&mut dw, &[2, 6, 3], Mode::Train, next())?));
    Ok(out)
}

