//! Integer and fixed-point arithmetic.
//!
//! Real values are mapped to unsigned integers with `x_int = clip(round(x / s) + z, 0, 2^b - 1)`
//! and back with `x = s * (x_int - z)`. Scales are held in a fixed-point
//! format (`raw * 2^-frac_bits`, `raw < 2^total_bits`) so that every scale the
//! integer data path touches is exactly representable.
//!
//! Rounding is half-away-from-zero everywhere, matching `f64::round`.

use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;

pub const DEFAULT_FRAC_BITS: u32 = 24;
pub const DEFAULT_SCALE_BITS: u32 = 32;

/// Mantissa width of the requantization multipliers derived from layer scales.
const MULTIPLIER_BITS: u32 = 31;
const MAX_FRAC_BITS: u32 = 62;

pub const SUPPORTED_BIT_WIDTHS: [u32; 5] = [2, 4, 6, 8, 10];

#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    libm::ldexp(1.0, e)
}

/// A non-negative scale stored as `raw * 2^-frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedScale {
    raw: u64,
    frac_bits: u32,
    total_bits: u32,
}

impl FixedScale {
    pub fn new(raw: u64, frac_bits: u32, total_bits: u32) -> Result<Self> {
        if total_bits == 0 || total_bits > 63 {
            return Err(Error::param(format!(
                "scale bit-width {total_bits} outside 1..=63"
            )));
        }
        if frac_bits > MAX_FRAC_BITS {
            return Err(Error::param(format!(
                "fractional bits {frac_bits} exceed {MAX_FRAC_BITS}"
            )));
        }
        if raw >> total_bits != 0 {
            return Err(Error::param(format!(
                "raw {raw} does not fit in {total_bits} bits"
            )));
        }
        Ok(Self {
            raw,
            frac_bits,
            total_bits,
        })
    }

    pub fn raw(&self) -> u64 {
        self.raw
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn value(&self) -> f64 {
        self.raw as f64 * pow2(-(self.frac_bits as i32))
    }

    pub fn is_zero(&self) -> bool {
        self.raw == 0
    }

    /// Scale of exactly 1.0 in the default format.
    pub fn unit() -> Self {
        Self {
            raw: 1 << DEFAULT_FRAC_BITS,
            frac_bits: DEFAULT_FRAC_BITS,
            total_bits: DEFAULT_SCALE_BITS,
        }
    }

    /// Smallest positive scale in the default format.
    pub fn smallest() -> Self {
        Self {
            raw: 1,
            frac_bits: DEFAULT_FRAC_BITS,
            total_bits: DEFAULT_SCALE_BITS,
        }
    }

    /// Default-format scale for a real value (truncating).
    pub fn from_real(s: f64) -> Self {
        fix_scale(s, DEFAULT_FRAC_BITS, DEFAULT_SCALE_BITS)
    }
}

/// Converts a real scale to fixed point: shift left by `frac_bits`, truncate,
/// and clip into `total_bits` bits.
pub fn fix_scale(s: f64, frac_bits: u32, total_bits: u32) -> FixedScale {
    let frac_bits = frac_bits.min(MAX_FRAC_BITS);
    let total_bits = total_bits.clamp(1, 63);
    let max_raw = (1u64 << total_bits) - 1;
    let shifted = s * pow2(frac_bits as i32);
    let raw = if shifted.is_nan() || shifted <= 0.0 {
        0
    } else if shifted >= max_raw as f64 {
        max_raw
    } else {
        (shifted.trunc() as u64).min(max_raw)
    };
    FixedScale {
        raw,
        frac_bits,
        total_bits,
    }
}

/// Normalized multiplier with a 31-bit mantissa, used for requantization.
pub(crate) fn fix_multiplier(m: f64) -> Result<FixedScale> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::param(format!(
            "requantization multiplier {m} must be positive"
        )));
    }
    let exp = m.log2().floor() as i32;
    let frac = (MULTIPLIER_BITS as i32 - 1 - exp).clamp(0, MAX_FRAC_BITS as i32) as u32;
    let fs = fix_scale(m, frac, MULTIPLIER_BITS + 1);
    if fs.is_zero() {
        return Err(Error::param(format!(
            "multiplier {m} underflows the fixed-point format"
        )));
    }
    Ok(fs)
}

fn check_bit_width(bits: u32) -> Result<()> {
    if SUPPORTED_BIT_WIDTHS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::param(format!("unsupported bit-width {bits}")))
    }
}

#[inline]
pub fn qmax(bits: u32) -> i32 {
    (1i32 << bits) - 1
}

#[inline]
pub fn quantize_value(x: f64, scale: f64, zero: i32, bits: u32) -> i32 {
    let q = (x / scale).round() + zero as f64;
    q.clamp(0.0, qmax(bits) as f64) as i32
}

/// `z = clip(-round(min / s), 0, 2^b - 1)`.
pub fn compute_zero_point(min_val: f64, scale: FixedScale, bit_width: u32) -> Result<i32> {
    if scale.is_zero() {
        return Err(Error::param("zero scale"));
    }
    let z = -(min_val / scale.value()).round();
    Ok(z.clamp(0.0, qmax(bit_width) as f64) as i32)
}

/// Scale, zero-point and bit-width of a quantized tensor, per layer (`axis == None`)
/// or per channel along `axis`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantSpec {
    pub bit_width: u32,
    pub scales: Vec<FixedScale>,
    pub zero_points: Vec<i32>,
    pub axis: Option<usize>,
}

impl QuantSpec {
    pub fn per_layer(scale: FixedScale, zero_point: i32, bit_width: u32) -> Self {
        Self {
            bit_width,
            scales: vec![scale],
            zero_points: vec![zero_point],
            axis: None,
        }
    }

    pub fn per_channel(
        axis: usize,
        scales: Vec<FixedScale>,
        zero_points: Vec<i32>,
        bit_width: u32,
    ) -> Self {
        Self {
            bit_width,
            scales,
            zero_points,
            axis: Some(axis),
        }
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        check_bit_width(self.bit_width)?;
        if self.scales.len() != self.zero_points.len() {
            return Err(Error::param("scale and zero-point counts differ"));
        }
        let expected = match self.axis {
            None => 1,
            Some(a) => *shape
                .get(a)
                .ok_or_else(|| Error::shape(format!("axis {a} out of range for {shape:?}")))?,
        };
        if self.scales.len() != expected {
            return Err(Error::shape(format!(
                "{} quantization channels for axis length {expected}",
                self.scales.len()
            )));
        }
        if self.scales.iter().any(FixedScale::is_zero) {
            return Err(Error::param("nonpositive scale"));
        }
        if self
            .zero_points
            .iter()
            .any(|&z| z < 0 || z > qmax(self.bit_width))
        {
            return Err(Error::param("zero-point outside the integer range"));
        }
        Ok(())
    }

    /// Maps a flat element index to its quantization channel.
    #[inline]
    pub(crate) fn channel_of(&self, index: usize, shape: &[usize]) -> usize {
        match self.axis {
            None => 0,
            Some(a) => {
                let inner: usize = shape[a + 1..].iter().product();
                (index / inner) % shape[a]
            }
        }
    }
}

/// Integer payload plus the affine parameters that give it meaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub spec: QuantSpec,
}

impl QTensor {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.shape.iter().product::<usize>() {
            return Err(Error::shape("payload length does not match shape"));
        }
        self.spec.validate(&self.shape)?;
        let hi = qmax(self.spec.bit_width);
        if self.values.iter().any(|&v| v < 0 || v > hi) {
            return Err(Error::param("payload element outside [0, 2^b - 1]"));
        }
        Ok(())
    }

    /// Values with the zero-point removed.
    pub fn centered(&self) -> Vec<i32> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| v - self.spec.zero_points[self.spec.channel_of(i, &self.shape)])
            .collect()
    }
}

pub fn quantize(x: &[f64], shape: &[usize], spec: &QuantSpec) -> Result<QTensor> {
    if x.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("data length does not match shape"));
    }
    spec.validate(shape)?;
    let scales: Vec<f64> = spec.scales.iter().map(FixedScale::value).collect();
    let values = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = spec.channel_of(i, shape);
            quantize_value(v, scales[c], spec.zero_points[c], spec.bit_width)
        })
        .collect();
    Ok(QTensor {
        shape: shape.to_vec(),
        values,
        spec: spec.clone(),
    })
}

/// Per-layer affine quantization of a flat tensor.
pub fn quantize_affine(
    x: &[f64],
    scale: FixedScale,
    zero_point: i32,
    bit_width: u32,
) -> Result<QTensor> {
    if scale.is_zero() {
        return Err(Error::param("nonpositive scale"));
    }
    quantize(
        x,
        &[x.len()],
        &QuantSpec::per_layer(scale, zero_point, bit_width),
    )
}

pub fn dequantize(q: &QTensor) -> Vec<f64> {
    let scales: Vec<f64> = q.spec.scales.iter().map(FixedScale::value).collect();
    q.values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = q.spec.channel_of(i, &q.shape);
            scales[c] * f64::from(v - q.spec.zero_points[c])
        })
        .collect()
}

/// Divides with round-half-away-from-zero.
fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.abs() / den;
    let r = num.abs() % den;
    let q = if 2 * r >= den { q + 1 } else { q };
    if num < 0 {
        -q
    } else {
        q
    }
}

/// Re-expresses integer biases in the accumulator scale `s_w[k] * s_x`:
/// `round(s_b / (s_w[k] * s_x) * b_int[k])`, computed exactly on the raw
/// fixed-point integers. `b_int` are zero-point-free bias integers.
pub fn rescale_bias(
    b_int: &[i32],
    s_b: FixedScale,
    s_w: &[FixedScale],
    s_x: FixedScale,
) -> Result<Vec<i32>> {
    if s_w.len() != 1 && s_w.len() != b_int.len() {
        return Err(Error::shape(
            "weight scale count must be 1 or match the bias length",
        ));
    }
    b_int
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let sw = s_w[if s_w.len() == 1 { 0 } else { k }];
            let den = i128::from(sw.raw) * i128::from(s_x.raw);
            if den == 0 {
                return Err(Error::param("zero weight or activation scale"));
            }
            let exp = sw.frac_bits as i32 + s_x.frac_bits as i32 - s_b.frac_bits as i32;
            let overflow = || Error::Overflow(format!("bias rescaling of {b} overflows"));
            let mut num = i128::from(b)
                .checked_mul(i128::from(s_b.raw))
                .ok_or_else(overflow)?;
            let mut den = den;
            if exp >= 0 {
                num = num
                    .checked_mul(1i128.checked_shl(exp as u32).ok_or_else(overflow)?)
                    .ok_or_else(overflow)?;
            } else {
                den = den
                    .checked_mul(1i128.checked_shl((-exp) as u32).ok_or_else(overflow)?)
                    .ok_or_else(overflow)?;
            }
            if num.unsigned_abs().leading_zeros() < 2 || den.leading_zeros() < 2 {
                return Err(overflow());
            }
            i32::try_from(div_round(num, den)).map_err(|_| overflow())
        })
        .collect()
}

/// Int32 accumulators of an integer convolution.
///
/// With per-channel input scales the accumulation is split into one group per
/// input channel, since those partial sums live in different scales.
/// `values` is laid out `[group][batch][C_out][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumTensor {
    pub shape: Vec<usize>,
    pub groups: usize,
    pub values: Vec<i32>,
    /// `s_w[k] * s_x[g]`, laid out `[C_out][group]`.
    pub combined_scale: Vec<f64>,
}

impl AccumTensor {
    pub fn group_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Real value of each output element (sum over groups), for inspection.
    pub fn real_values(&self) -> Vec<f64> {
        let n = self.group_len();
        let c_out = self.shape[1];
        let plane = self.shape[2] * self.shape[3];
        (0..n)
            .map(|i| {
                let k = (i / plane) % c_out;
                (0..self.groups)
                    .map(|g| {
                        f64::from(self.values[g * n + i]) * self.combined_scale[k * self.groups + g]
                    })
                    .sum()
            })
            .collect()
    }
}

/// Bias already expressed in accumulator units, added into one accumulator group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccumBias {
    pub values: Vec<i32>,
    pub group: usize,
}

/// Integer convolution with exact 32-bit accumulation of
/// `(w_int - z_w) * (x_int - z_x)` plus the rescaled bias.
///
/// `x` is `[B, C_in, H, W]`, quantized per layer or along axis 1.
/// `w` is `[C_out, C_in, K, K]`, quantized per layer or along axis 0.
pub fn accumulate_conv(
    x: &QTensor,
    w: &QTensor,
    bias: Option<&AccumBias>,
    geom: ConvGeometry,
) -> Result<AccumTensor> {
    x.validate()?;
    w.validate()?;
    if x.spec.bit_width > 10 || w.spec.bit_width > 10 {
        return Err(Error::param(
            "integer convolution supports at most 10-bit operands",
        ));
    }
    if x.shape.len() != 4 || w.shape.len() != 4 {
        return Err(Error::shape("expected 4-D activation and weight tensors"));
    }
    let (batch, c_in, h, wid) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (c_out, wc_in, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if wc_in != c_in || kh != kw {
        return Err(Error::shape(format!(
            "weight {:?} incompatible with input {:?}",
            w.shape, x.shape
        )));
    }
    if !matches!(x.spec.axis, None | Some(1)) || !matches!(w.spec.axis, None | Some(0)) {
        return Err(Error::param(
            "activations quantize along axis 1, weights along axis 0",
        ));
    }
    let oh = geom.output_len(h, kh)?;
    let ow = geom.output_len(wid, kw)?;
    let groups = if x.spec.axis.is_some() { c_in } else { 1 };
    if let Some(b) = bias {
        if b.values.len() != c_out || b.group >= groups {
            return Err(Error::shape("bias length or group out of range"));
        }
    }

    let xc = x.centered();
    let wc = w.centered();
    let out_len = batch * c_out * oh * ow;
    let mut values = vec![0i32; groups * out_len];
    let overflow = || Error::Overflow("32-bit accumulator overflow".into());

    for b in 0..batch {
        for k in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((b * c_out + k) * oh + oy) * ow + ox;
                    let mut acc = 0i32;
                    for c in 0..c_in {
                        let g = if groups > 1 { c } else { 0 };
                        if groups > 1 {
                            acc = 0;
                        }
                        for ky in 0..kh {
                            let Some(iy) = geom.input_index(oy, ky, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = geom.input_index(ox, kx, wid) else {
                                    continue;
                                };
                                let prod = wc[((k * c_in + c) * kh + ky) * kw + kx]
                                    .checked_mul(xc[((b * c_in + c) * h + iy) * wid + ix])
                                    .ok_or_else(overflow)?;
                                acc = acc.checked_add(prod).ok_or_else(overflow)?;
                            }
                        }
                        if groups > 1 || c + 1 == c_in {
                            values[g * out_len + o] = acc;
                        }
                    }
                    if let Some(bias) = bias {
                        let slot = &mut values[bias.group * out_len + o];
                        *slot = slot.checked_add(bias.values[k]).ok_or_else(overflow)?;
                    }
                }
            }
        }
    }

    let mut combined_scale = Vec::with_capacity(c_out * groups);
    for k in 0..c_out {
        let sw = w.spec.scales[if w.spec.axis.is_some() { k } else { 0 }].value();
        for g in 0..groups {
            combined_scale.push(sw * x.spec.scales[g].value());
        }
    }
    Ok(AccumTensor {
        shape: vec![batch, c_out, oh, ow],
        groups,
        values,
        combined_scale,
    })
}

/// Target of a requantization: per-output-channel (or single) scale and
/// zero-point, and the integer clip range.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputQuant {
    pub scales: Vec<FixedScale>,
    pub zero_points: Vec<i32>,
    pub lo: i32,
    pub hi: i32,
    /// Clip each channel's low end at its zero-point (ReLU in the integer domain).
    pub relu: bool,
}

impl OutputQuant {
    pub fn unsigned(
        scales: Vec<FixedScale>,
        zero_points: Vec<i32>,
        bit_width: u32,
        relu: bool,
    ) -> Self {
        Self {
            scales,
            zero_points,
            lo: 0,
            hi: qmax(bit_width),
            relu,
        }
    }

    /// Signed integer target at a fixed scale and zero offset (latents).
    pub fn signed(scale: FixedScale, lo: i32, hi: i32) -> Self {
        Self {
            scales: vec![scale],
            zero_points: vec![0],
            lo,
            hi,
            relu: false,
        }
    }

    fn channel(&self, k: usize) -> usize {
        if self.scales.len() == 1 {
            0
        } else {
            k
        }
    }
}

/// Requantization multipliers `combined_scale / next_scale` as 31-bit fixed-point values.
pub fn requant_multipliers(acc: &AccumTensor, target: &OutputQuant) -> Result<Vec<FixedScale>> {
    let c_out = acc.shape[1];
    if target.scales.len() != 1 && target.scales.len() != c_out {
        return Err(Error::shape("target scale count must be 1 or C_out"));
    }
    let mut out = Vec::with_capacity(c_out * acc.groups);
    for k in 0..c_out {
        let next = target.scales[target.channel(k)];
        if next.is_zero() {
            return Err(Error::param("zero output scale"));
        }
        for g in 0..acc.groups {
            out.push(fix_multiplier(
                acc.combined_scale[k * acc.groups + g] / next.value(),
            )?);
        }
    }
    Ok(out)
}

/// Scales accumulators into the next layer's integer domain using only
/// integer multiplies and shifts: `clip(round(sum_g acc_g * M_kg) + z, lo, hi)`.
pub fn requantize(acc: &AccumTensor, target: &OutputQuant) -> Result<Vec<i32>> {
    let mults = requant_multipliers(acc, target)?;
    let groups = acc.groups;
    let n = acc.group_len();
    let c_out = acc.shape[1];
    let plane = acc.shape[2] * acc.shape[3];
    let shift = mults.iter().map(FixedScale::frac_bits).max().unwrap_or(0);
    // Align every multiplier to the common shift once.
    let aligned: Vec<i128> = mults
        .iter()
        .map(|m| i128::from(m.raw()) << (shift - m.frac_bits()))
        .collect();
    let den = 1i128 << shift;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = (i / plane) % c_out;
        let mut sum = 0i128;
        for g in 0..groups {
            let term = i128::from(acc.values[g * n + i])
                .checked_mul(aligned[k * groups + g])
                .ok_or_else(|| Error::Overflow("requantization product".into()))?;
            sum = sum
                .checked_add(term)
                .ok_or_else(|| Error::Overflow("requantization sum".into()))?;
        }
        let z = i128::from(target.zero_points[target.channel(k)]);
        let q = div_round(sum, den) + z;
        let lo = if target.relu {
            z.max(i128::from(target.lo))
        } else {
            i128::from(target.lo)
        };
        out.push(q.clamp(lo, i128::from(target.hi)) as i32);
    }
    Ok(out)
}

/// Strict-integer quantized convolution: accumulate in int32, then requantize
/// to the next layer's unsigned format.
#[allow(clippy::too_many_arguments)]
pub fn qconv_integer(
    x: &QTensor,
    w: &QTensor,
    bias: Option<&AccumBias>,
    geom: ConvGeometry,
    next_scales: Vec<FixedScale>,
    next_zero_points: Vec<i32>,
    bit_width: u32,
    relu: bool,
) -> Result<QTensor> {
    check_bit_width(bit_width)?;
    let acc = accumulate_conv(x, w, bias, geom)?;
    let axis = (next_scales.len() > 1).then_some(1);
    let target = OutputQuant::unsigned(
        next_scales.clone(),
        next_zero_points.clone(),
        bit_width,
        relu,
    );
    let values = requantize(&acc, &target)?;
    let spec = QuantSpec {
        bit_width,
        scales: next_scales,
        zero_points: next_zero_points,
        axis,
    };
    let q = QTensor {
        shape: acc.shape.clone(),
        values,
        spec,
    };
    q.validate()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn precise(s: f64) -> FixedScale {
        fix_scale(s, 48, 62)
    }

    #[test]
    fn quantize_examples() {
        let s = FixedScale::from_real(0.1);
        assert_eq!(quantize_affine(&[0.5], s, 0, 8).unwrap().values, vec![5]);
        assert_eq!(
            quantize_affine(&[100.0], s, 0, 8).unwrap().values,
            vec![255]
        );
        let s = FixedScale::from_real(0.05);
        assert_eq!(
            quantize_affine(&[-0.25], s, 20, 8).unwrap().values,
            vec![15]
        );
    }

    #[test]
    fn quantize_rejects_zero_scale_and_odd_bits() {
        assert!(quantize_affine(&[1.0], fix_scale(0.0, 16, 32), 0, 8).is_err());
        assert!(quantize_affine(&[1.0], FixedScale::unit(), 0, 7).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = quantize_affine(&[0.5], precise(0.1), 0, 8).unwrap();
        assert!((dequantize(&q)[0] - 0.5).abs() < 1e-12);
        let q = QTensor {
            shape: vec![1],
            values: vec![15],
            spec: QuantSpec::per_layer(precise(0.05), 20, 8),
        };
        assert!((dequantize(&q)[0] + 0.25).abs() < 1e-12);
        let q = QTensor {
            shape: vec![1],
            values: vec![37],
            spec: QuantSpec::per_layer(precise(0.3), 37, 8),
        };
        assert_eq!(dequantize(&q)[0], 0.0);
    }

    #[test]
    fn zero_point_examples() {
        assert_eq!(
            compute_zero_point(0.0, FixedScale::from_real(0.37), 8).unwrap(),
            0
        );
        let s = FixedScale::from_real(0.1);
        assert_eq!(compute_zero_point(-1.0, s, 8).unwrap(), 10);
        assert_eq!(compute_zero_point(-12.8, s, 8).unwrap(), 128);
        // Round-trip oracle: the range minimum survives quantization.
        for &min in &[-1.0, -12.8] {
            let s = precise(0.1);
            let z = compute_zero_point(min, s, 8).unwrap();
            let q = quantize_affine(&[min], s, z, 8).unwrap();
            assert_eq!(q.values[0], 0);
            assert!((dequantize(&q)[0] - min).abs() < 1e-9);
        }
    }

    /// Integer reference for truncating fixed-point conversion.
    fn shift_reference(num: u64, den: u64, frac_bits: u32, total_bits: u32) -> u64 {
        // num/den * 2^frac, truncated, using integer arithmetic only.
        let v = (u128::from(num) << frac_bits) / u128::from(den);
        v.min((1u128 << total_bits) - 1) as u64
    }

    #[test]
    fn fix_scale_examples() {
        let a = fix_scale(0.1, 8, 16);
        assert_eq!(a.raw(), shift_reference(1, 10, 8, 16));
        assert_eq!(a.value(), 0.09765625);
        assert_eq!(fix_scale(0.0, 8, 16).raw(), 0);
        let c = fix_scale(300.0, 8, 16);
        assert_eq!(c.raw(), shift_reference(300, 1, 8, 16));
        assert_eq!(c.value(), 255.99609375);
    }

    #[test]
    fn fix_scale_is_idempotent() {
        for &s in &[0.1, 1e-3, 0.77, 12.5, 3e4] {
            let a = FixedScale::from_real(s);
            assert_eq!(FixedScale::from_real(a.value()), a);
        }
    }

    #[test]
    fn rescale_bias_examples() {
        let out = rescale_bias(&[3], precise(0.01), &[precise(0.001)], precise(0.05)).unwrap();
        assert_eq!(out, vec![600]);
        let out = rescale_bias(&[0], precise(0.3), &[precise(0.2)], precise(0.1)).unwrap();
        assert_eq!(out, vec![0]);
        let s_w = FixedScale::from_real(0.5);
        let s_x = FixedScale::from_real(0.25);
        let s_b = FixedScale::from_real(0.125);
        assert_eq!(rescale_bias(&[7], s_b, &[s_w], s_x).unwrap(), vec![7]);
    }

    #[test]
    fn rescale_bias_overflow_is_an_error() {
        let tiny = FixedScale::smallest();
        let big = fix_scale(60000.0, 16, 32);
        let r = rescale_bias(&[i32::MAX], big, &[tiny], tiny);
        assert!(matches!(r, Err(Error::Overflow(_))));
    }

    fn single(v: i32, s: f64, z: i32) -> QTensor {
        QTensor {
            shape: vec![1, 1, 1, 1],
            values: vec![v],
            spec: QuantSpec::per_layer(FixedScale::from_real(s), z, 8),
        }
    }

    #[test]
    fn qconv_single_pixel_example() {
        let x = single(3, 0.1, 0);
        let w = single(2, 0.5, 0);
        let bias = AccumBias {
            values: vec![4],
            group: 0,
        };
        let acc = accumulate_conv(&x, &w, Some(&bias), ConvGeometry::forward(1, 0)).unwrap();
        assert_eq!(acc.values, vec![10]);
        assert!((acc.real_values()[0] - 0.5).abs() < 1e-4);
        let out = qconv_integer(
            &x,
            &w,
            Some(&bias),
            ConvGeometry::forward(1, 0),
            vec![FixedScale::from_real(0.25)],
            vec![0],
            8,
            false,
        )
        .unwrap();
        assert_eq!(out.values, vec![2]);
    }

    #[test]
    fn qconv_zero_inputs_give_next_zero() {
        let x = QTensor {
            shape: vec![1, 2, 3, 3],
            values: vec![7; 18],
            spec: QuantSpec::per_layer(FixedScale::from_real(0.1), 7, 8),
        };
        let w = QTensor {
            shape: vec![2, 2, 3, 3],
            values: vec![0; 36],
            spec: QuantSpec::per_layer(FixedScale::from_real(0.02), 0, 8),
        };
        let out = qconv_integer(
            &x,
            &w,
            Some(&AccumBias {
                values: vec![0, 0],
                group: 0,
            }),
            ConvGeometry::forward(1, 1),
            vec![FixedScale::from_real(0.05)],
            vec![42],
            8,
            false,
        )
        .unwrap();
        assert!(out.values.iter().all(|&v| v == 42));
    }

    #[test]
    fn accumulator_overflow_is_an_error() {
        let n = 64 * 64;
        let x = QTensor {
            shape: vec![1, n, 1, 1],
            values: vec![1023; n],
            spec: QuantSpec::per_layer(FixedScale::unit(), 0, 10),
        };
        let w = QTensor {
            shape: vec![1, n, 1, 1],
            values: vec![1023; n],
            spec: QuantSpec::per_layer(FixedScale::unit(), 0, 10),
        };
        let r = accumulate_conv(&x, &w, None, ConvGeometry::forward(1, 0));
        assert!(matches!(r, Err(Error::Overflow(_))));
    }

    #[test]
    fn requantize_is_deterministic_and_signed_target_works() {
        let acc = AccumTensor {
            shape: vec![1, 1, 1, 3],
            groups: 1,
            values: vec![-12, 0, 12],
            combined_scale: vec![0.125],
        };
        let t = OutputQuant::signed(FixedScale::unit(), -100, 100);
        let a = requantize(&acc, &t).unwrap();
        assert_eq!(a, vec![-2, 0, 2]);
        assert_eq!(a, requantize(&acc, &t).unwrap());
    }
}
