use std::ops::Range;

use sha2::{Digest, Sha256};

use super::ops::{fake_quant_tensor, quantize_levels, ChannelQ, RoundingState};
use super::params::{BiasMode, LayerQuantParams};
use crate::error::{Error, Result};
use crate::fixedpoint::{
    accumulate_conv, dequantize, fix_scale, qmax, requantize, rescale_bias, AccumBias, FixedScale,
    OutputQuant, QTensor, QuantSpec,
};
use crate::licnet::format::{hex, ByteReader, ByteWriter};
use crate::licnet::model::{forward, rd_point, ModelVars, RoundSite, Stages};
use crate::licnet::{Architecture, Container, LayerParams, LayerSpec, LicModel, RdPoint, Role};
use crate::tensor::{conv_forward, Graph, Tensor, Var};

/// Input quantizer of a layer: one scale and zero-point per channel, or one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActQuant {
    pub scales: Vec<FixedScale>,
    pub zero_points: Vec<i32>,
}

impl ActQuant {
    /// Fixed format of integer latents: unit scale, zero-point at mid-range.
    pub fn latent(bits: u32) -> Self {
        Self {
            scales: vec![FixedScale::unit()],
            zero_points: vec![1 << (bits - 1)],
        }
    }

    pub fn from_channels(ch: &[ChannelQ]) -> Self {
        Self {
            scales: ch.iter().map(|c| c.scale).collect(),
            zero_points: ch.iter().map(|c| c.zero).collect(),
        }
    }

    /// Resolved channels without a multiplier slope (frozen).
    pub fn channels(&self) -> Vec<ChannelQ> {
        self.scales
            .iter()
            .zip(&self.zero_points)
            .map(|(&scale, &zero)| ChannelQ {
                scale,
                zero,
                dsdn: 0.0,
            })
            .collect()
    }

    pub fn axis(&self) -> Option<usize> {
        (self.scales.len() > 1).then_some(1)
    }

    pub fn spec(&self, bits: u32) -> QuantSpec {
        match self.axis() {
            Some(a) => {
                QuantSpec::per_channel(a, self.scales.clone(), self.zero_points.clone(), bits)
            }
            None => QuantSpec::per_layer(self.scales[0], self.zero_points[0], bits),
        }
    }

    pub fn fake(&self, x: &Tensor, bits: u32) -> Tensor {
        fake_quant_tensor(
            x,
            self.axis(),
            &self.channels(),
            bits,
            None,
            RoundingState::Nearest,
        )
    }

    /// Accumulator group receiving the bias: the finest input scale.
    pub fn bias_group(&self) -> usize {
        (0..self.scales.len())
            .min_by_key(|&g| (self.scales[g].value().to_bits(), g))
            .unwrap_or(0)
    }

    fn target(&self, bits: u32, relu: bool) -> OutputQuant {
        OutputQuant::unsigned(self.scales.clone(), self.zero_points.clone(), bits, relu)
    }
}

/// Integer bias, its accumulator-unit form and the real value the
/// accumulator represents.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPlan {
    pub q: Vec<i32>,
    pub acc: Vec<i32>,
    pub real: Vec<f64>,
}

/// Quantizes a bias at its own `b`-bit scale and moves it into the accumulator
/// scale `s_w[k]·s_x` (rescaled mode), or quantizes it at the accumulator
/// scale directly (32-bit reference).
pub fn plan_bias(
    b: &[f64],
    bq: &ChannelQ,
    bits: u32,
    s_w: &[FixedScale],
    s_x: FixedScale,
    mode: BiasMode,
) -> Result<BiasPlan> {
    let sb = bq.scale.value();
    let hi = f64::from(qmax(bits));
    let q: Vec<i32> = b
        .iter()
        .map(|&v| ((v / sb).round() + f64::from(bq.zero)).clamp(0.0, hi) as i32)
        .collect();
    let sw = |k: usize| s_w[if s_w.len() == 1 { 0 } else { k }];
    let acc = match mode {
        BiasMode::Rescaled => {
            let centered: Vec<i32> = q.iter().map(|&v| v - bq.zero).collect();
            rescale_bias(&centered, bq.scale, s_w, s_x)?
        }
        BiasMode::Int32 => b
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let a = (v / (sw(k).value() * s_x.value())).round();
                if a.abs() > f64::from(i32::MAX) {
                    return Err(Error::Overflow(format!(
                        "bias {v} exceeds the 32-bit accumulator"
                    )));
                }
                Ok(a as i32)
            })
            .collect::<Result<_>>()?,
    };
    let real = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| f64::from(a) * sw(k).value() * s_x.value())
        .collect();
    Ok(BiasPlan { q, acc, real })
}

/// Frozen integer parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    pub bit_width: u32,
    pub input: ActQuant,
    /// False when activations stay float (the bias still uses the input scale).
    pub quantize_input: bool,
    pub weight: QTensor,
    pub bias_scale: FixedScale,
    pub bias_zero: i32,
    pub bias_q: Vec<i32>,
    pub bias_mode: BiasMode,
    pub bias_acc: Vec<i32>,
    pub bias_group: usize,
    /// Explicit output quantizer (hyper-decoder tail, whose output feeds the
    /// scale table rather than another layer).
    pub output: Option<ActQuant>,
    pub n_w: Vec<f64>,
    pub n_x: Vec<f64>,
    pub n_b: f64,
}

impl LayerQuant {
    pub fn freeze(
        params: &LayerQuantParams,
        layer: &LayerParams,
        input: ActQuant,
        quantize_input: bool,
        bias_mode: BiasMode,
        rounding: RoundingState,
    ) -> Result<Self> {
        let bits = params.bit_width;
        let wch = ChannelQ::resolve(&params.n_w, &params.w_stats, bits)?;
        let axis = (wch.len() > 1).then_some(0);
        let values = quantize_levels(&layer.weight, axis, &wch, bits, params.v.as_ref(), rounding);
        let scales: Vec<FixedScale> = wch.iter().map(|c| c.scale).collect();
        let zeros: Vec<i32> = wch.iter().map(|c| c.zero).collect();
        let spec = match axis {
            Some(a) => QuantSpec::per_channel(a, scales.clone(), zeros, bits),
            None => QuantSpec::per_layer(scales[0], zeros[0], bits),
        };
        let weight = QTensor {
            shape: layer.weight.shape().to_vec(),
            values,
            spec,
        };
        weight.validate()?;
        let bch = ChannelQ::resolve(&[params.n_b], &params.b_stats, bits)?[0];
        let group = input.bias_group();
        let plan = plan_bias(
            layer.bias.data(),
            &bch,
            bits,
            &scales,
            input.scales[group],
            bias_mode,
        )?;
        Ok(Self {
            bit_width: bits,
            input,
            quantize_input,
            weight,
            bias_scale: bch.scale,
            bias_zero: bch.zero,
            bias_q: plan.q,
            bias_mode,
            bias_acc: plan.acc,
            bias_group: group,
            output: None,
            n_w: params.n_w.clone(),
            n_x: params.n_x.clone(),
            n_b: params.n_b,
        })
    }

    pub fn weight_real(&self) -> Result<Tensor> {
        Tensor::new(self.weight.shape.clone(), dequantize(&self.weight))
    }

    /// Real value of the bias as seen by the accumulator.
    pub fn bias_real(&self) -> Tensor {
        let sx = self.input.scales[self.bias_group].value();
        let per = self.weight.spec.scales.len() > 1;
        let data = self
            .bias_acc
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                f64::from(a) * self.weight.spec.scales[if per { k } else { 0 }].value() * sx
            })
            .collect();
        Tensor::new(vec![self.bias_acc.len()], data).expect("bias length")
    }

    /// Simulated quantization: dequantized operands in float arithmetic.
    pub fn simulate(&self, x: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
        let xq = if self.quantize_input {
            self.input.fake(x, self.bit_width)
        } else {
            x.clone()
        };
        let mut y = conv_forward(
            &xq,
            &self.weight_real()?,
            Some(&self.bias_real()),
            spec.geometry(),
        )?;
        if spec.relu {
            y = y.map(|v| v.max(0.0));
        }
        if let Some(out) = &self.output {
            y = out.fake(&y, self.bit_width);
        }
        Ok(y)
    }

    /// Strict integer path: int32 accumulation, bias add, requantization.
    pub fn integer(
        &self,
        x: &QTensor,
        spec: &LayerSpec,
        target: &OutputQuant,
    ) -> Result<(Vec<usize>, Vec<i32>)> {
        if !self.quantize_input {
            return Err(Error::param(
                "integer inference needs quantized activations",
            ));
        }
        let bias = AccumBias {
            values: self.bias_acc.clone(),
            group: self.bias_group,
        };
        let acc = accumulate_conv(x, &self.weight, Some(&bias), spec.geometry())?;
        Ok((acc.shape.clone(), requantize(&acc, target)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        self.write(&mut w);
        w.into_inner()
    }

    /// SHA-256 of the serialized layer, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    fn write(&self, w: &mut ByteWriter) {
        w.u8(self.bit_width as u8);
        write_act(w, &self.input);
        w.u8(self.quantize_input as u8);
        w.u8(self.weight.shape.len() as u8);
        for &d in &self.weight.shape {
            w.u32(d as u32);
        }
        w.u8(self.weight.spec.axis.map_or(u8::MAX, |a| a as u8));
        write_scales(w, &self.weight.spec.scales, &self.weight.spec.zero_points);
        for &v in &self.weight.values {
            w.u16(v as u16);
        }
        write_scale(w, self.bias_scale);
        w.i32(self.bias_zero);
        w.u8(matches!(self.bias_mode, BiasMode::Int32) as u8);
        w.u32(self.bias_group as u32);
        w.u32(self.bias_q.len() as u32);
        for (&q, &a) in self.bias_q.iter().zip(&self.bias_acc) {
            w.i32(q);
            w.i32(a);
        }
        match &self.output {
            Some(o) => {
                w.u8(1);
                write_act(w, o);
            }
            None => w.u8(0),
        }
        w.u32(self.n_w.len() as u32);
        self.n_w.iter().for_each(|&v| w.f64(v));
        w.u32(self.n_x.len() as u32);
        self.n_x.iter().for_each(|&v| w.f64(v));
        w.f64(self.n_b);
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let bit_width = u32::from(r.u8()?);
        let input = read_act(r)?;
        let quantize_input = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let axis = match r.u8()? {
            u8::MAX => None,
            a => Some(a as usize),
        };
        let (scales, zero_points) = read_scales(r)?;
        let n: usize = shape.iter().product();
        if n > 1 << 24 {
            return Err(Error::Format("implausible weight size".into()));
        }
        let values = (0..n)
            .map(|_| r.u16().map(i32::from))
            .collect::<Result<Vec<_>>>()?;
        let weight = QTensor {
            shape,
            values,
            spec: QuantSpec {
                bit_width,
                scales,
                zero_points,
                axis,
            },
        };
        weight
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias_scale = read_scale(r)?;
        let bias_zero = r.i32()?;
        let bias_mode = if r.u8()? == 1 {
            BiasMode::Int32
        } else {
            BiasMode::Rescaled
        };
        let bias_group = r.u32()? as usize;
        let nb = r.u32()? as usize;
        if nb != weight.shape[0] || bias_group >= input.scales.len() {
            return Err(Error::Format("bias does not match the layer".into()));
        }
        let mut bias_q = Vec::with_capacity(nb);
        let mut bias_acc = Vec::with_capacity(nb);
        for _ in 0..nb {
            bias_q.push(r.i32()?);
            bias_acc.push(r.i32()?);
        }
        let output = if r.u8()? == 1 {
            Some(read_act(r)?)
        } else {
            None
        };
        let read_f64s = |r: &mut ByteReader<'_>| -> Result<Vec<f64>> {
            let n = r.u32()? as usize;
            if n > 1 << 16 {
                return Err(Error::Format("implausible multiplier count".into()));
            }
            (0..n).map(|_| r.f64()).collect()
        };
        let n_w = read_f64s(r)?;
        let n_x = read_f64s(r)?;
        let n_b = r.f64()?;
        Ok(Self {
            bit_width,
            input,
            quantize_input,
            weight,
            bias_scale,
            bias_zero,
            bias_q,
            bias_mode,
            bias_acc,
            bias_group,
            output,
            n_w,
            n_x,
            n_b,
        })
    }
}

fn write_scale(w: &mut ByteWriter, s: FixedScale) {
    w.u64(s.raw());
    w.u8(s.frac_bits() as u8);
    w.u8(s.total_bits() as u8);
}

fn read_scale(r: &mut ByteReader<'_>) -> Result<FixedScale> {
    let raw = r.u64()?;
    let frac = u32::from(r.u8()?);
    let total = u32::from(r.u8()?);
    FixedScale::new(raw, frac, total).map_err(|e| Error::Format(e.to_string()))
}

fn write_scales(w: &mut ByteWriter, scales: &[FixedScale], zeros: &[i32]) {
    w.u32(scales.len() as u32);
    for (&s, &z) in scales.iter().zip(zeros) {
        write_scale(w, s);
        w.i32(z);
    }
}

fn read_scales(r: &mut ByteReader<'_>) -> Result<(Vec<FixedScale>, Vec<i32>)> {
    let n = r.u32()? as usize;
    if n == 0 || n > 1 << 16 {
        return Err(Error::Format("implausible channel count".into()));
    }
    let mut s = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        s.push(read_scale(r)?);
        z.push(r.i32()?);
    }
    Ok((s, z))
}

fn write_act(w: &mut ByteWriter, a: &ActQuant) {
    write_scales(w, &a.scales, &a.zero_points);
}

fn read_act(r: &mut ByteReader<'_>) -> Result<ActQuant> {
    let (scales, zero_points) = read_scales(r)?;
    Ok(ActQuant {
        scales,
        zero_points,
    })
}

/// Signed integer range of latents at bit-width `bits`.
pub fn latent_range(bits: u32) -> (i32, i32) {
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

/// Target of the last decoder layer: 8-bit pixels.
pub fn pixel_target() -> OutputQuant {
    OutputQuant {
        scales: vec![fix_scale(1.0 / 255.0, 48, 62)],
        zero_points: vec![0],
        lo: 0,
        hi: 255,
        relu: false,
    }
}

/// Layers whose input is an integer latent and therefore uses the fixed
/// [`ActQuant::latent`] format.
pub fn consumes_latent(arch: &Architecture, index: usize) -> bool {
    [Role::Decoder, Role::HyperEncoder, Role::HyperDecoder]
        .iter()
        .any(|&r| arch.range(r).start == index)
}

/// Pipeline hooks with layers `0..quant.len()` replaced by their frozen
/// quantized simulation; the rest stay float.
pub struct QuantStages<'a> {
    pub model: &'a LicModel,
    pub vars: ModelVars,
    pub quant: &'a [LayerQuant],
    pub bits: u32,
    /// Inputs seen by each layer in the last pass.
    pub record: Option<Vec<Option<Tensor>>>,
}

impl<'a> QuantStages<'a> {
    pub fn new(g: &mut Graph, model: &'a LicModel, quant: &'a [LayerQuant], bits: u32) -> Self {
        Self {
            model,
            vars: model.bind(g, false),
            quant,
            bits,
            record: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = Some(vec![None; self.model.layers.len()]);
        self
    }
}

impl Stages for QuantStages<'_> {
    fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    fn layer(&mut self, g: &mut Graph, index: usize, x: Var) -> Result<Var> {
        if let Some(rec) = self.record.as_mut() {
            rec[index] = Some(g.value(x).clone());
        }
        let spec = self.model.arch.layers[index];
        if let Some(lq) = self.quant.get(index) {
            let y = lq.simulate(g.value(x), &spec)?;
            return Ok(g.constant(y));
        }
        let (w, b) = self.vars.layers[index];
        let y = g.conv2d(x, w, Some(b), spec.geometry())?;
        Ok(if spec.relu { g.relu(y) } else { y })
    }

    fn round(&mut self, g: &mut Graph, y: Var, _site: RoundSite) -> Result<Var> {
        let (lo, hi) = latent_range(self.bits);
        let r = g.ste_round(y);
        Ok(g.clamp(r, f64::from(lo), f64::from(hi)))
    }

    fn entropy(&self) -> Var {
        self.vars.entropy
    }

    fn hyper_entropy(&self) -> Option<Var> {
        self.vars.hyper_entropy
    }

    fn reconstruct(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.clamp(x, 0.0, 1.0);
        let up = g.mul_scalar(c, 255.0);
        let r = g.ste_round(up);
        Ok(g.mul_scalar(r, 1.0 / 255.0))
    }
}

/// A calibrated codec: the float model plus one frozen quantizer per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub float: LicModel,
    pub bit_width: u32,
    pub layers: Vec<LayerQuant>,
}

const QUANT_MAGIC: &[u8; 4] = b"RDQQ";

impl QuantizedModel {
    pub fn quant_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(QUANT_MAGIC);
        w.u8(self.bit_width as u8);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            l.write(&mut w);
        }
        w.into_inner()
    }

    pub fn from_quant_bytes(float: LicModel, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != QUANT_MAGIC {
            return Err(Error::Format("bad quantization section magic".into()));
        }
        let bit_width = u32::from(r.u8()?);
        let n = r.u32()? as usize;
        if n != float.layers.len() {
            return Err(Error::Format(format!(
                "{n} quantized layers for a {}-layer model",
                float.layers.len()
            )));
        }
        let layers = (0..n)
            .map(|_| LayerQuant::read(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Format(
                "trailing bytes after the quantization section".into(),
            ));
        }
        for (l, spec) in layers.iter().zip(&float.arch.layers) {
            if l.weight.shape != spec.weight_shape() || l.bit_width != bit_width {
                return Err(Error::Format(
                    "quantized layer does not match the architecture".into(),
                ));
            }
        }
        Ok(Self {
            float,
            bit_width,
            layers,
        })
    }

    pub fn to_container(&self, meta: Vec<(String, String)>) -> Container {
        Container {
            model: self.float.clone(),
            quant: Some(self.quant_bytes()),
            meta,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bytes = c
            .quant
            .as_ref()
            .ok_or_else(|| Error::Format("container holds no quantized model".into()))?;
        Self::from_quant_bytes(c.model.clone(), bytes)
    }

    pub fn digests(&self) -> Vec<String> {
        self.layers.iter().map(LayerQuant::digest).collect()
    }

    /// Simulated-quantization R-D evaluation of an image batch.
    pub fn forward_rd(&self, x: &Tensor) -> Result<(Tensor, RdPoint)> {
        let mut g = Graph::new();
        let mut st = QuantStages::new(&mut g, &self.float, &self.layers, self.bit_width);
        let xv = g.constant(x.clone());
        let trace = forward(&mut g, &mut st, xv)?;
        Ok((
            g.value(trace.x_hat).clone(),
            rd_point(&g, xv, &trace, self.float.lambda),
        ))
    }

    /// Integer target of layer `i`'s output: the next layer's input quantizer, latent
    /// integers, 8-bit pixels or the hyper-decoder output quantizer.
    pub fn output_target(&self, i: usize) -> Result<OutputQuant> {
        let arch = &self.float.arch;
        let spec = arch.layers[i];
        let range = arch.range(spec.role);
        if i + 1 < range.end {
            return Ok(self.layers[i + 1].input.target(self.bit_width, spec.relu));
        }
        let (lo, hi) = latent_range(self.bit_width);
        Ok(match spec.role {
            Role::Encoder | Role::HyperEncoder => OutputQuant::signed(FixedScale::unit(), lo, hi),
            Role::Decoder => pixel_target(),
            Role::HyperDecoder => self.layers[i]
                .output
                .as_ref()
                .ok_or_else(|| Error::param("hyper-decoder tail has no output quantizer"))?
                .target(self.bit_width, spec.relu),
        })
    }

    /// Runs `range` on the integer path; returns the last layer's output codes.
    fn run_integer(&self, range: Range<usize>, mut x: QTensor) -> Result<(Vec<usize>, Vec<i32>)> {
        let mut out = (x.shape.clone(), x.values.clone());
        for i in range.clone() {
            let spec = self.float.arch.layers[i];
            out = self.layers[i].integer(&x, &spec, &self.output_target(i)?)?;
            if i + 1 < range.end {
                let next = &self.layers[i + 1];
                x = QTensor {
                    shape: out.0.clone(),
                    values: out.1.clone(),
                    spec: next.input.spec(self.bit_width),
                };
            }
        }
        Ok(out)
    }

    fn latent_codes(&self, y: &Tensor, consumer: usize) -> Result<QTensor> {
        let input = &self.layers[consumer].input;
        let z = input.zero_points[0];
        let hi = qmax(self.bit_width);
        let values = y
            .data()
            .iter()
            .map(|&v| (v as i32 + z).clamp(0, hi))
            .collect();
        Ok(QTensor {
            shape: y.shape().to_vec(),
            values,
            spec: input.spec(self.bit_width),
        })
    }

    fn codes_tensor(shape: Vec<usize>, codes: &[i32], offset: i32) -> Result<Tensor> {
        Tensor::new(
            shape,
            codes.iter().map(|&c| f64::from(c - offset)).collect(),
        )
    }

    /// Integer analysis transform: pixels to signed latent integers.
    pub fn integer_analyze(&self, x: &Tensor) -> Result<Tensor> {
        crate::licnet::model::check_image_shape(x.shape())?;
        let enc = self.float.arch.range(Role::Encoder);
        let first = &self.layers[enc.start];
        let codes =
            crate::fixedpoint::quantize(x.data(), x.shape(), &first.input.spec(self.bit_width))?;
        let (shape, y) = self.run_integer(enc, codes)?;
        Self::codes_tensor(shape, &y, 0)
    }

    /// Integer synthesis transform: latent integers to pixels on the 0-1 scale.
    pub fn integer_synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        let dec = self.float.arch.range(Role::Decoder);
        let codes = self.latent_codes(y_hat, dec.start)?;
        let (shape, px) = self.run_integer(dec, codes)?;
        Tensor::new(shape, px.iter().map(|&p| f64::from(p) / 255.0).collect())
    }

    /// Integer hyper-encoder: `Ẑ` from `Ŷ`.
    pub fn integer_hyper_latent(&self, y_hat: &Tensor) -> Result<Option<Tensor>> {
        if !self.float.arch.hyperprior() {
            return Ok(None);
        }
        let ha = self.float.arch.range(Role::HyperEncoder);
        let codes = self.latent_codes(y_hat, ha.start)?;
        let (shape, z) = self.run_integer(ha, codes)?;
        Self::codes_tensor(shape, &z, 0).map(Some)
    }

    /// Gaussian scales predicted from `Ẑ` through the integer hyper-decoder.
    pub fn integer_scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        let hs = self.float.arch.range(Role::HyperDecoder);
        let codes = self.latent_codes(z_hat, hs.start)?;
        let last = &self.layers[hs.end - 1];
        let out = last
            .output
            .as_ref()
            .ok_or_else(|| Error::param("hyper-decoder tail has no output quantizer"))?;
        let (shape, s) = self.run_integer(hs, codes)?;
        let q = QTensor {
            shape,
            values: s,
            spec: out.spec(self.bit_width),
        };
        let real = Tensor::new(q.shape.clone(), dequantize(&q))?;
        Ok(real.map(|v| {
            crate::tensor::softplus_scalar(v) + crate::licnet::entropy_model::SCALE_LOWER_BOUND
        }))
    }
}

/// Evaluates an R-D point of any pipeline hooks on a batch, without gradients.
pub fn evaluate<S: Stages>(st: &mut S, g: &mut Graph, x: &Tensor, lambda: f64) -> Result<RdPoint> {
    let xv = g.constant(x.clone());
    let trace = forward(g, st, xv)?;
    Ok(rd_point(g, xv, &trace, lambda))
}
