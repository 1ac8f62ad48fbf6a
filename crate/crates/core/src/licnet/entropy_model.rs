//! Probability models for the latent symbols.
//!
//! The factorized model is a per-channel mixture of two logistics; the
//! probability of an integer symbol is `CDF(y + 1/2) - CDF(y - 1/2)`. The
//! conditional model used with the hyperprior is a zero-mean Gaussian with a
//! per-element scale.

use std::f64::consts::{LN_2, SQRT_2};

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Graph, Tensor, Var};

/// Mixture components per channel.
pub const MIXTURE_COMPONENTS: usize = 2;
/// Parameters per channel: logits, means, log-scales.
pub const PARAMS_PER_CHANNEL: usize = 3 * MIXTURE_COMPONENTS;
/// Floor on a symbol probability when converting to bits.
pub const MIN_PROBABILITY: f64 = 1.0 / (1u64 << 23) as f64;
/// Lower bound of the Gaussian scale predicted by the hyper-decoder.
pub const SCALE_LOWER_BOUND: f64 = 0.11;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid_scalar(x)
}

/// `sigmoid(hi) - sigmoid(lo)` without cancellation in the upper tail.
#[inline]
fn sigmoid_diff(hi: f64, lo: f64) -> f64 {
    if lo > 0.0 {
        sigmoid(-lo) - sigmoid(-hi)
    } else {
        sigmoid(hi) - sigmoid(lo)
    }
}

#[inline]
fn dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

fn softmax(logits: &[f64]) -> [f64; MIXTURE_COMPONENTS] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; MIXTURE_COMPONENTS];
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Borrowed view of one channel's mixture parameters.
#[derive(Clone, Copy, Debug)]
pub struct Mixture<'a> {
    params: &'a [f64],
}

impl<'a> Mixture<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        debug_assert_eq!(params.len(), PARAMS_PER_CHANNEL);
        Self { params }
    }

    fn weights(&self) -> [f64; MIXTURE_COMPONENTS] {
        softmax(&self.params[..MIXTURE_COMPONENTS])
    }

    fn mean(&self, k: usize) -> f64 {
        self.params[MIXTURE_COMPONENTS + k]
    }

    fn scale(&self, k: usize) -> f64 {
        self.params[2 * MIXTURE_COMPONENTS + k].exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let w = self.weights();
        (0..MIXTURE_COMPONENTS)
            .map(|k| w[k] * sigmoid((y - self.mean(k)) / self.scale(k)))
            .sum()
    }

    /// Probability mass of the unit bin centred on `y`.
    pub fn bin_probability(&self, y: f64) -> f64 {
        let w = self.weights();
        (0..MIXTURE_COMPONENTS)
            .map(|k| {
                let s = self.scale(k);
                w[k] * sigmoid_diff((y + 0.5 - self.mean(k)) / s, (y - 0.5 - self.mean(k)) / s)
            })
            .sum()
    }
}

/// Unit-bin probability of a zero-mean Gaussian with scale `sigma`.
pub fn gaussian_bin_probability(y: f64, sigma: f64) -> f64 {
    let a = (0.5 - y.abs()) / sigma;
    let b = (-0.5 - y.abs()) / sigma;
    normal_cdf(a) - normal_cdf(b)
}

#[inline]
fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / SQRT_2)
}

#[inline]
fn normal_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

#[inline]
fn bits_of(p: f64) -> f64 {
    -p.max(MIN_PROBABILITY).log2()
}

/// Initial factorized-model parameters: two zero-mean logistics of scale 1 and 4.
pub fn init_mixture_params(channels: usize) -> Tensor {
    let per = [0.0, 0.0, 0.0, 0.0, 0.0, 4f64.ln()];
    Tensor::from_fn(&[channels, PARAMS_PER_CHANNEL], |i| {
        per[i % PARAMS_PER_CHANNEL]
    })
}

fn check_channels(symbols: &[usize], params: &[usize]) -> Result<usize> {
    let &[_, c, _, _] = symbols else {
        return Err(Error::shape(format!("latent must be 4-D, got {symbols:?}")));
    };
    if params != [c, PARAMS_PER_CHANNEL] {
        return Err(Error::shape(format!(
            "entropy parameters {params:?} for {c} channels"
        )));
    }
    Ok(c)
}

/// Bits of every element of `y_hat` under the per-channel factorized model.
pub fn factorized_bits(y_hat: &Tensor, params: &Tensor) -> Result<Tensor> {
    let c = check_channels(y_hat.shape(), params.shape())?;
    let plane = y_hat.shape()[2] * y_hat.shape()[3];
    let p = params.data();
    let bits = y_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let ch = (i / plane) % c;
            bits_of(
                Mixture::new(&p[ch * PARAMS_PER_CHANNEL..(ch + 1) * PARAMS_PER_CHANNEL])
                    .bin_probability(y),
            )
        })
        .collect();
    Tensor::new(y_hat.shape().to_vec(), bits)
}

struct FactorizedBitsOp {
    channels: usize,
    plane: usize,
}

impl BackwardOp for FactorizedBitsOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let (y, params) = (inputs[0].data(), inputs[1].data());
        let mut dy = vec![0.0; y.len()];
        let mut dp = vec![0.0; params.len()];
        for (i, &yv) in y.iter().enumerate() {
            let ch = (i / self.plane) % self.channels;
            let base = ch * PARAMS_PER_CHANNEL;
            let m = Mixture::new(&params[base..base + PARAMS_PER_CHANNEL]);
            let w = m.weights();
            let mut p = 0.0;
            let mut diffs = [0.0; MIXTURE_COMPONENTS];
            let mut terms = [(0.0, 0.0, 0.0, 0.0); MIXTURE_COMPONENTS];
            for k in 0..MIXTURE_COMPONENTS {
                let s = m.scale(k);
                let u = (yv + 0.5 - m.mean(k)) / s;
                let l = (yv - 0.5 - m.mean(k)) / s;
                diffs[k] = sigmoid_diff(u, l);
                p += w[k] * diffs[k];
                terms[k] = (u, l, dsigmoid(u), dsigmoid(l));
            }
            if p <= MIN_PROBABILITY {
                continue;
            }
            // d bits / d p
            let g = grad[i] * (-1.0 / (p * LN_2));
            for k in 0..MIXTURE_COMPONENTS {
                let s = m.scale(k);
                let (u, l, du, dl) = terms[k];
                let dp_dy = w[k] * (du - dl) / s;
                dy[i] += g * dp_dy;
                dp[base + MIXTURE_COMPONENTS + k] -= g * dp_dy;
                dp[base + 2 * MIXTURE_COMPONENTS + k] += g * w[k] * (-u * du + l * dl);
                dp[base + k] += g * w[k] * (diffs[k] - p);
            }
        }
        vec![Some(dy), Some(dp)]
    }
}

/// Bits of every element of `y_hat` under a zero-mean Gaussian with per-element scale.
pub fn gaussian_bits(y_hat: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if y_hat.shape() != sigma.shape() {
        return Err(Error::shape("latent and scale shapes differ"));
    }
    let bits = y_hat
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&y, &s)| bits_of(gaussian_bin_probability(y, s)))
        .collect();
    Tensor::new(y_hat.shape().to_vec(), bits)
}

struct GaussianBitsOp;

impl BackwardOp for GaussianBitsOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let (y, sigma) = (inputs[0].data(), inputs[1].data());
        let mut dy = vec![0.0; y.len()];
        let mut ds = vec![0.0; y.len()];
        for i in 0..y.len() {
            let s = sigma[i];
            let ay = y[i].abs();
            let a = (0.5 - ay) / s;
            let b = (-0.5 - ay) / s;
            let p = normal_cdf(a) - normal_cdf(b);
            if p <= MIN_PROBABILITY {
                continue;
            }
            let g = grad[i] * (-1.0 / (p * LN_2));
            let (pa, pb) = (normal_pdf(a), normal_pdf(b));
            let sign = if y[i] >= 0.0 { 1.0 } else { -1.0 };
            dy[i] = g * sign * (pb - pa) / s;
            ds[i] = g * (b * pb - a * pa) / s;
        }
        vec![Some(dy), Some(ds)]
    }
}

impl Graph {
    /// Per-element bits of `y_hat` under the factorized mixture `params` (`[C, 6]`).
    pub fn factorized_bits(&mut self, y_hat: Var, params: Var) -> Result<Var> {
        let value = factorized_bits(self.value(y_hat), self.value(params))?;
        let shape = self.shape(y_hat);
        let op = FactorizedBitsOp {
            channels: shape[1],
            plane: shape[2] * shape[3],
        };
        Ok(self.custom(&[y_hat, params], value, Box::new(op)))
    }

    /// Per-element bits of `y_hat` under zero-mean Gaussians with scales `sigma`.
    pub fn gaussian_bits(&mut self, y_hat: Var, sigma: Var) -> Result<Var> {
        let value = gaussian_bits(self.value(y_hat), self.value(sigma))?;
        Ok(self.custom(&[y_hat, sigma], value, Box::new(GaussianBitsOp)))
    }
}
