//! Simulated-quantization operators with straight-through gradients.
//!
//! Scale gradients follow the learned-step-size rule: inside the clip range
//! `∂x̂/∂s = round(x/s) - x/s`, outside it `∂x̂/∂s = q_clip - z`. The chain to
//! the range multiplier uses `∂s/∂N = r / (2^b - 1)`, ignoring the truncation
//! of the fixed-point conversion. Zero-points are treated as constants.

use super::params::{resolve_channel, RangeStats};
use crate::error::Result;
use crate::fixedpoint::{qmax, FixedScale};
use crate::tensor::{sigmoid_scalar, BackwardOp, Graph, Tensor, Var};

/// Stretch of the rectified sigmoid: `h(v) = clip(σ(v)·(ζ - γ) + γ, 0, 1)`.
const ZETA: f64 = 1.1;
const GAMMA: f64 = -0.1;

pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid_scalar(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid_scalar(v);
    let raw = s * (ZETA - GAMMA) + GAMMA;
    if raw > 0.0 && raw < 1.0 {
        (ZETA - GAMMA) * s * (1.0 - s)
    } else {
        0.0
    }
}

/// Offset whose rectified sigmoid equals `h` (clamped away from the flat ends).
pub fn inverse_rectified_sigmoid(h: f64) -> f64 {
    let s = ((h.clamp(0.0, 1.0) - GAMMA) / (ZETA - GAMMA)).clamp(1e-6, 1.0 - 1e-6);
    (s / (1.0 - s)).ln()
}

/// Resolved quantizer of one channel plus the slope `∂s/∂N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelQ {
    pub scale: FixedScale,
    pub zero: i32,
    /// Zero for degenerate channels, which are excluded from optimization.
    pub dsdn: f64,
}

impl ChannelQ {
    pub fn resolve(n: &[f64], stats: &RangeStats, bits: u32) -> Result<Vec<Self>> {
        let q = f64::from(qmax(bits));
        n.iter()
            .enumerate()
            .map(|(c, &nc)| {
                let (scale, zero) = resolve_channel(nc, stats, c, bits)?;
                let (lo, hi) = stats.span(c);
                let dsdn = if stats.is_degenerate(c) {
                    0.0
                } else {
                    (hi - lo) / q
                };
                Ok(Self { scale, zero, dsdn })
            })
            .collect()
    }
}

/// Channel of a flat index when channels sit at a fixed stride.
#[derive(Clone, Copy, Debug)]
struct Layout {
    channels: usize,
    inner: usize,
}

impl Layout {
    fn new(shape: &[usize], axis: Option<usize>, channels: usize) -> Self {
        match axis {
            Some(a) if channels > 1 => Self {
                channels,
                inner: shape[a + 1..].iter().product(),
            },
            _ => Self {
                channels: 1,
                inner: shape.iter().product::<usize>().max(1),
            },
        }
    }

    #[inline]
    fn of(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }
}

/// How a weight becomes an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingState {
    Nearest,
    /// `floor(w/s) + h(V)` with the continuous offset.
    Soft,
    /// `floor(w/s) + [h(V) ≥ 0.5]`.
    Hard,
}

/// Integer level (before clipping and zero-point) of `x` at scale `s`.
#[inline]
fn level(x: f64, s: f64, v: Option<f64>, state: RoundingState) -> f64 {
    match (state, v) {
        (RoundingState::Nearest, _) | (_, None) => (x / s).round(),
        (RoundingState::Soft, Some(v)) => (x / s).floor() + rectified_sigmoid(v),
        (RoundingState::Hard, Some(v)) => {
            (x / s).floor()
                + if rectified_sigmoid(v) >= 0.5 {
                    1.0
                } else {
                    0.0
                }
        }
    }
}

/// Dequantized value, clip flag and `∂x̂/∂s` of one element.
#[inline]
fn fake(x: f64, q: &ChannelQ, bits: u32, v: Option<f64>, state: RoundingState) -> (f64, bool, f64) {
    let s = q.scale.value();
    let z = f64::from(q.zero);
    let lv = level(x, s, v, state);
    let raw = lv + z;
    let hi = f64::from(qmax(bits));
    if raw < 0.0 || raw > hi {
        let c = raw.clamp(0.0, hi) - z;
        (s * c, false, c)
    } else {
        (s * lv, true, lv - x / s)
    }
}

struct FakeQuantOp {
    channels: Vec<ChannelQ>,
    layout: Layout,
    bits: u32,
    state: RoundingState,
    has_v: bool,
}

impl BackwardOp for FakeQuantOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let v = self.has_v.then(|| inputs[2].data());
        let mut gx = vec![0.0; x.len()];
        let mut gn = vec![0.0; inputs[1].len()];
        let mut gv = v.map(|v| vec![0.0; v.len()]);
        for (i, (&xi, &gi)) in x.iter().zip(grad).enumerate() {
            let c = self.layout.of(i);
            let q = &self.channels[c];
            let vi = v.map(|v| v[i]);
            let (_, inside, dxds) = fake(xi, q, self.bits, vi, self.state);
            gn[c] += gi * dxds * q.dsdn;
            if inside {
                gx[i] = gi;
                if let (Some(gv), Some(vi)) = (gv.as_mut(), vi) {
                    if self.state == RoundingState::Soft {
                        gv[i] = gi * q.scale.value() * rectified_sigmoid_grad(vi);
                    }
                }
            }
        }
        let mut out = vec![Some(gx), Some(gn)];
        if self.has_v {
            out.push(gv);
        }
        out
    }
}

/// Simulated quantization of `x` along `axis`, with optional rounding offsets `v`.
pub fn fake_quant_tensor(
    x: &Tensor,
    axis: Option<usize>,
    channels: &[ChannelQ],
    bits: u32,
    v: Option<&Tensor>,
    state: RoundingState,
) -> Tensor {
    let layout = Layout::new(x.shape(), axis, channels.len());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            fake(
                xi,
                &channels[layout.of(i)],
                bits,
                v.map(|v| v.data()[i]),
                state,
            )
            .0
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Integer codes `clip(level + z, 0, 2^b - 1)`; dequantizing them reproduces
/// [`fake_quant_tensor`] exactly.
pub fn quantize_levels(
    x: &Tensor,
    axis: Option<usize>,
    channels: &[ChannelQ],
    bits: u32,
    v: Option<&Tensor>,
    state: RoundingState,
) -> Vec<i32> {
    let layout = Layout::new(x.shape(), axis, channels.len());
    let hi = f64::from(qmax(bits));
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let q = &channels[layout.of(i)];
            let lv = level(xi, q.scale.value(), v.map(|v| v.data()[i]), state);
            (lv + f64::from(q.zero)).clamp(0.0, hi) as i32
        })
        .collect()
}

impl Graph {
    /// Fake-quantizes `x` with per-channel multipliers `n` (one per channel, or one).
    /// The channel resolution in `channels` must correspond to the current `n`.
    pub fn fake_quant(
        &mut self,
        x: Var,
        n: Var,
        v: Option<Var>,
        axis: Option<usize>,
        channels: Vec<ChannelQ>,
        bits: u32,
        state: RoundingState,
    ) -> Var {
        let value = fake_quant_tensor(
            self.value(x),
            axis,
            &channels,
            bits,
            v.map(|v| self.value(v)),
            state,
        );
        let layout = Layout::new(self.shape(x), axis, channels.len());
        let op = FakeQuantOp {
            channels,
            layout,
            bits,
            state,
            has_v: v.is_some(),
        };
        let mut inputs = vec![x, n];
        inputs.extend(v);
        self.custom(&inputs, value, Box::new(op))
    }

    /// `Σ (1 - |2h(V) - 1|^β)`, pushing every offset towards 0 or 1.
    pub fn rounding_regularizer(&mut self, v: Var, beta: f64) -> Var {
        let total = self
            .value(v)
            .data()
            .iter()
            .map(|&vi| 1.0 - (2.0 * rectified_sigmoid(vi) - 1.0).abs().powf(beta))
            .sum();
        self.custom(
            &[v],
            Tensor::scalar(total),
            Box::new(RegularizerOp { beta }),
        )
    }

    /// Bias with a precomputed forward value and a learned-step gradient for
    /// its multiplier only.
    pub(crate) fn fake_quant_bias(
        &mut self,
        b: Var,
        n: Var,
        value: Tensor,
        channel: ChannelQ,
        bits: u32,
    ) -> Var {
        let op = BiasOp { channel, bits };
        self.custom(&[b, n], value, Box::new(op))
    }
}

struct RegularizerOp {
    beta: f64,
}

impl BackwardOp for RegularizerOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        let gv = inputs[0]
            .data()
            .iter()
            .map(|&v| {
                let u = 2.0 * rectified_sigmoid(v) - 1.0;
                if u == 0.0 {
                    return 0.0;
                }
                -g * self.beta
                    * u.abs().powf(self.beta - 1.0)
                    * u.signum()
                    * 2.0
                    * rectified_sigmoid_grad(v)
            })
            .collect();
        vec![Some(gv)]
    }
}

struct BiasOp {
    channel: ChannelQ,
    bits: u32,
}

impl BackwardOp for BiasOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let b = inputs[0].data();
        let mut gb = vec![0.0; b.len()];
        let mut gn = 0.0;
        for (i, (&bi, &gi)) in b.iter().zip(grad).enumerate() {
            let (_, inside, dxds) =
                fake(bi, &self.channel, self.bits, None, RoundingState::Nearest);
            gn += gi * dxds * self.channel.dsdn;
            if inside {
                gb[i] = gi;
            }
        }
        vec![Some(gb), Some(vec![gn])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chan(s: f64, z: i32) -> ChannelQ {
        ChannelQ {
            scale: FixedScale::from_real(s),
            zero: z,
            dsdn: 1.0,
        }
    }

    #[test]
    fn rectified_sigmoid_round_trip() {
        for h in [0.0, 0.05, 0.3, 0.5, 0.77, 1.0] {
            let v = inverse_rectified_sigmoid(h);
            assert!((rectified_sigmoid(v) - h).abs() < 1e-5, "{h}");
        }
    }

    #[test]
    fn nearest_matches_affine_formula() {
        let q = chan(0.25, 4);
        let x = Tensor::new(vec![5], vec![-2.0, -0.3, 0.1, 0.37, 9.0]).unwrap();
        let y = fake_quant_tensor(&x, None, &[q], 4, None, RoundingState::Nearest);
        assert_eq!(y.data(), &[-1.0, -0.25, 0.0, 0.25, 2.75]);
    }

    #[test]
    fn scale_gradient_inside_and_outside() {
        let q = chan(0.25, 4);
        // 0.3/0.25 = 1.2 rounds to 1: slope 1 - 1.2
        let (_, inside, d) = fake(0.3, &q, 4, None, RoundingState::Nearest);
        assert!(inside && (d + 0.2).abs() < 1e-12);
        let (_, inside, d) = fake(9.0, &q, 4, None, RoundingState::Nearest);
        assert!(!inside && d == 11.0);
        let (_, inside, d) = fake(-2.0, &q, 4, None, RoundingState::Nearest);
        assert!(!inside && d == -4.0);
    }

    #[test]
    fn hard_offsets_are_floor_or_ceil() {
        let q = chan(0.5, 8);
        let x = Tensor::full(&[4], 0.7);
        let v = Tensor::new(vec![4], vec![-5.0, -0.1, 0.1, 5.0]).unwrap();
        let y = fake_quant_tensor(&x, None, &[q], 4, Some(&v), RoundingState::Hard);
        assert_eq!(y.data(), &[0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn regularizer_peaks_at_half() {
        let mut g = Graph::new();
        let mid = g.param(Tensor::scalar(inverse_rectified_sigmoid(0.5)));
        let r = g.rounding_regularizer(mid, 20.0);
        assert!((g.value(r).item().unwrap() - 1.0).abs() < 1e-6);
        let hard = g.param(Tensor::new(vec![2], vec![-8.0, 8.0]).unwrap());
        let r = g.rounding_regularizer(hard, 2.0);
        assert_eq!(g.value(r).item().unwrap(), 0.0);
    }
}
