use crate::error::{Error, Result};
use crate::fixedpoint::{
    compute_zero_point, fix_scale, qmax, FixedScale, DEFAULT_FRAC_BITS, DEFAULT_SCALE_BITS,
    SUPPORTED_BIT_WIDTHS,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    ChannelWise,
    LayerWise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMethod {
    MinMax,
    GridSearch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rounding {
    /// Learned floor/ceil decision per weight.
    Adaptive,
    Nearest,
}

/// How the bias reaches the 32-bit accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasMode {
    /// b-bit bias rescaled into the accumulator scale.
    Rescaled,
    /// Bias quantized directly at the accumulator scale (32-bit reference).
    Int32,
}

/// What the per-layer optimization minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// `λ_t·L_task + L_lq`.
    RateDistortion,
    /// Per-tensor quantization MSE only.
    TensorMse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibConfig {
    pub bit_width: u32,
    /// Adam steps per layer.
    pub steps: usize,
    /// Learning rate of the range multipliers.
    pub lr: f64,
    /// Learning rate of the rounding offsets.
    pub lr_v: f64,
    pub lambda_t: f64,
    pub lambda_reg: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub granularity: Granularity,
    pub init: InitMethod,
    pub rounding: Rounding,
    pub bias: BiasMode,
    /// When off, activations stay float (scales are still derived for the bias).
    pub quantize_activations: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            bit_width: 8,
            steps: 300,
            lr: 1e-3,
            lr_v: 1e-2,
            lambda_t: 1.0,
            lambda_reg: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            granularity: Granularity::ChannelWise,
            init: InitMethod::MinMax,
            rounding: Rounding::Adaptive,
            bias: BiasMode::Rescaled,
            quantize_activations: true,
            objective: Objective::RateDistortion,
            seed: 0,
        }
    }
}

impl CalibConfig {
    /// Min-Max scales, nearest rounding and no optimization.
    pub fn minmax_baseline(bit_width: u32) -> Self {
        Self {
            bit_width,
            steps: 0,
            rounding: Rounding::Nearest,
            ..Self::default()
        }
    }

    /// Scales fitted to per-tensor MSE with nearest rounding.
    pub fn mse_ptq(bit_width: u32) -> Self {
        Self {
            bit_width,
            rounding: Rounding::Nearest,
            objective: Objective::TensorMse,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BIT_WIDTHS.contains(&self.bit_width) {
            return Err(Error::param(format!(
                "unsupported bit-width {}",
                self.bit_width
            )));
        }
        if !(self.lr > 0.0 && self.lr_v > 0.0 && self.lambda_t >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::param(
                "learning rates must be positive and loss weights nonnegative",
            ));
        }
        Ok(())
    }

    /// β of the rounding regularizer after `step` of `steps`, annealed linearly.
    pub fn beta(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.beta_end;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t
    }
}

/// Observed minimum and maximum per quantization channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl RangeStats {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Statistics along `axis` of a tensor (or over the whole tensor).
    pub fn collect(t: &Tensor, axis: Option<usize>) -> Self {
        let shape = t.shape();
        let (channels, inner) = match axis {
            Some(a) => (shape[a], shape[a + 1..].iter().product::<usize>()),
            None => (1, t.len().max(1)),
        };
        let mut min = vec![f64::INFINITY; channels];
        let mut max = vec![f64::NEG_INFINITY; channels];
        for (i, &v) in t.data().iter().enumerate() {
            let c = (i / inner) % channels;
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
        for c in 0..channels {
            if min[c] > max[c] {
                min[c] = 0.0;
                max[c] = 0.0;
            }
        }
        Self { min, max }
    }

    /// Weight statistics `[C_out, ...]`.
    pub fn of_weight(w: &Tensor, g: Granularity) -> Self {
        Self::collect(w, (g == Granularity::ChannelWise).then_some(0))
    }

    /// Activation statistics `[B, C, H, W]`.
    pub fn of_activation(x: &Tensor, g: Granularity) -> Self {
        Self::collect(x, (g == Granularity::ChannelWise).then_some(1))
    }

    /// Range extended to include zero, so that zero (padding, a dead ReLU)
    /// is exactly representable.
    pub fn span(&self, c: usize) -> (f64, f64) {
        (self.min[c].min(0.0), self.max[c].max(0.0))
    }

    pub fn is_degenerate(&self, c: usize) -> bool {
        let (lo, hi) = self.span(c);
        hi - lo <= 0.0
    }
}

/// `s = Γ(N·r / (2^b - 1))` and `z = clip(-round(N·min / s))` for one channel.
/// Degenerate (all-zero) channels get a unit scale and zero-point 0; a scale
/// that truncates to zero is raised to the smallest representable step.
pub fn resolve_channel(
    n: f64,
    stats: &RangeStats,
    c: usize,
    bits: u32,
) -> Result<(FixedScale, i32)> {
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numeric(format!(
            "range multiplier {n} must be positive"
        )));
    }
    if stats.is_degenerate(c) {
        return Ok((FixedScale::unit(), 0));
    }
    let (lo, hi) = stats.span(c);
    let mut s = fix_scale(
        n * (hi - lo) / f64::from(qmax(bits)),
        DEFAULT_FRAC_BITS,
        DEFAULT_SCALE_BITS,
    );
    if s.is_zero() {
        s = FixedScale::smallest();
    }
    Ok((s, compute_zero_point(n * lo, s, bits)?))
}

pub fn resolve(n: &[f64], stats: &RangeStats, bits: u32) -> Result<(Vec<FixedScale>, Vec<i32>)> {
    if n.len() != stats.channels() {
        return Err(Error::shape(
            "one multiplier per statistics channel is required",
        ));
    }
    let mut scales = Vec::with_capacity(n.len());
    let mut zeros = Vec::with_capacity(n.len());
    for (c, &nc) in n.iter().enumerate() {
        let (s, z) = resolve_channel(nc, stats, c, bits)?;
        scales.push(s);
        zeros.push(z);
    }
    Ok((scales, zeros))
}

/// Learnable quantization state of one layer during calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuantParams {
    pub bit_width: u32,
    pub n_w: Vec<f64>,
    pub n_x: Vec<f64>,
    pub n_b: f64,
    pub w_stats: RangeStats,
    /// `None` for inputs with a fixed integer format (latents).
    pub x_stats: Option<RangeStats>,
    pub b_stats: RangeStats,
    /// Continuous rounding offsets, same shape as the weight.
    pub v: Option<Tensor>,
}

impl LayerQuantParams {
    pub fn weight_scales(&self) -> Result<(Vec<FixedScale>, Vec<i32>)> {
        resolve(&self.n_w, &self.w_stats, self.bit_width)
    }

    pub fn bias_scale(&self) -> Result<(FixedScale, i32)> {
        resolve_channel(self.n_b, &self.b_stats, 0, self.bit_width)
    }

    pub fn input_scales(&self) -> Result<Option<(Vec<FixedScale>, Vec<i32>)>> {
        self.x_stats
            .as_ref()
            .map(|s| resolve(&self.n_x, s, self.bit_width))
            .transpose()
    }
}

/// Unit multipliers with Min-Max statistics.
pub fn init_minmax(
    weight: &Tensor,
    bias: &Tensor,
    x_stats: Option<RangeStats>,
    bit_width: u32,
    granularity: Granularity,
) -> Result<LayerQuantParams> {
    if !SUPPORTED_BIT_WIDTHS.contains(&bit_width) {
        return Err(Error::param(format!("unsupported bit-width {bit_width}")));
    }
    let w_stats = RangeStats::of_weight(weight, granularity);
    let n_x = x_stats
        .as_ref()
        .map_or(Vec::new(), |s| vec![1.0; s.channels()]);
    Ok(LayerQuantParams {
        bit_width,
        n_w: vec![1.0; w_stats.channels()],
        n_x,
        n_b: 1.0,
        w_stats,
        x_stats,
        b_stats: RangeStats::collect(bias, None),
        v: None,
    })
}

/// Candidate multipliers of the grid search: ten uniform steps over `[0.5, 1.0]`.
pub fn grid_candidates() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.5 * i as f64 / 9.0)
}

/// Nearest-rounding quantization error `Σ(x - x̂)²` of the values of channel
/// `c` under multiplier `n`.
pub fn channel_mse<'a>(
    values: impl Iterator<Item = &'a f64>,
    n: f64,
    stats: &RangeStats,
    c: usize,
    bits: u32,
) -> Result<f64> {
    let (s, z) = resolve_channel(n, stats, c, bits)?;
    let sv = s.value();
    let hi = f64::from(qmax(bits));
    Ok(values
        .map(|&x| {
            let q = ((x / sv).round() + f64::from(z)).clamp(0.0, hi);
            let d = sv * (q - f64::from(z)) - x;
            d * d
        })
        .sum())
}

/// Per-channel multiplier from [`grid_candidates`] minimizing the quantization
/// MSE of `t` (channels along `axis`). Ties prefer the larger multiplier.
pub fn grid_search(
    t: &Tensor,
    axis: Option<usize>,
    stats: &RangeStats,
    bits: u32,
) -> Result<Vec<f64>> {
    let shape = t.shape();
    let (channels, inner) = match axis {
        Some(a) => (shape[a], shape[a + 1..].iter().product::<usize>()),
        None => (1, t.len().max(1)),
    };
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, v) in t.data().iter().enumerate() {
        per[(i / inner) % channels].push(*v);
    }
    per.iter()
        .enumerate()
        .map(|(c, vals)| {
            let mut best = (f64::INFINITY, 1.0);
            for &n in grid_candidates().iter().rev() {
                let e = channel_mse(vals.iter(), n, stats, c, bits)?;
                if e < best.0 {
                    best = (e, n);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Grid-searched multipliers for weight, bias and (given the calibration
/// inputs the activation statistics came from) activations.
pub fn init_gridsearch(
    weight: &Tensor,
    bias: &Tensor,
    x_stats: Option<RangeStats>,
    inputs: Option<&Tensor>,
    bit_width: u32,
    granularity: Granularity,
) -> Result<LayerQuantParams> {
    let mut p = init_minmax(weight, bias, x_stats, bit_width, granularity)?;
    let w_axis = (granularity == Granularity::ChannelWise).then_some(0);
    p.n_w = grid_search(weight, w_axis, &p.w_stats, bit_width)?;
    p.n_b = grid_search(bias, None, &p.b_stats, bit_width)?[0];
    if let (Some(x), Some(stats)) = (inputs, p.x_stats.as_ref()) {
        let x_axis = (stats.channels() > 1).then_some(1);
        p.n_x = grid_search(x, x_axis, stats, bit_width)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_scale_example() {
        let w = Tensor::new(vec![1, 2, 1, 1], vec![-1.0, 0.5]).unwrap();
        let p = init_minmax(&w, &Tensor::zeros(&[1]), None, 8, Granularity::ChannelWise).unwrap();
        let (s, z) = p.weight_scales().unwrap();
        let exact: f64 = 1.5 / 255.0;
        assert!((exact - 0.0058824).abs() < 1e-7);
        assert!(
            s[0].value() <= exact && exact - s[0].value() < 2f64.powi(-(DEFAULT_FRAC_BITS as i32))
        );
        assert_eq!(z[0], 170);
    }

    #[test]
    fn degenerate_and_constant_tensors() {
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let p = init_minmax(&w, &Tensor::zeros(&[2]), None, 8, Granularity::ChannelWise).unwrap();
        let (s, z) = p.weight_scales().unwrap();
        assert_eq!(s, vec![FixedScale::unit(); 2]);
        assert_eq!(z, vec![0, 0]);
        // constant nonzero values keep zero in range and hit one level
        let c = Tensor::full(&[1, 1, 2, 2], 0.7);
        let st = RangeStats::of_weight(&c, Granularity::LayerWise);
        let (s, z) = resolve_channel(1.0, &st, 0, 8).unwrap();
        let q = ((0.7 / s.value()).round() as i32 + z).clamp(0, 255);
        assert!(q == 255 || q == 254);
    }

    #[test]
    fn per_channel_scales_differ() {
        let w = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, -0.1, 0.1]).unwrap();
        let p = init_minmax(&w, &Tensor::zeros(&[2]), None, 8, Granularity::ChannelWise).unwrap();
        let (s, _) = p.weight_scales().unwrap();
        assert_ne!(s[0], s[1]);
        let p = init_minmax(&w, &Tensor::zeros(&[2]), None, 8, Granularity::LayerWise).unwrap();
        assert_eq!(p.weight_scales().unwrap().0.len(), 1);
    }

    #[test]
    fn grid_candidates_span() {
        let g = grid_candidates();
        assert_eq!(g[0], 0.5);
        assert_eq!(g[9], 1.0);
    }

    #[test]
    fn beta_anneals_linearly() {
        let c = CalibConfig {
            steps: 11,
            ..CalibConfig::default()
        };
        assert_eq!(c.beta(0), 20.0);
        assert_eq!(c.beta(10), 2.0);
        assert!((c.beta(5) - 11.0).abs() < 1e-12);
    }
}
