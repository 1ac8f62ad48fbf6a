//! Entropy-coded image compression for float and quantized models.
//!
//! The latent (and hyper-latent) symbols are range coded in one stream, `Ẑ`
//! first. Factorized channels get one CDF row each over the range between
//! their `TAIL_MASS` quantiles; conditional Gaussians share a table of
//! `SCALE_LEVELS` log-spaced scales. Everything outside a row escapes.

use crate::calib::QuantizedModel;
use crate::entropycodec::cdf::quantize_pmf;
use crate::entropycodec::range::{decode_symbols, encode_symbols};
use crate::entropycodec::{Bitstream, CdfRow, CdfTable, Header, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::licnet::arch::{Architecture, Role, DOWNSAMPLING};
use crate::licnet::entropy_model::{
    factorized_bits, gaussian_bin_probability, gaussian_bits, Mixture, SCALE_LOWER_BOUND,
};
use crate::licnet::format::{digest64, Container};
use crate::licnet::{Image, LicModel};
use crate::tensor::Tensor;

/// Probability mass left outside each factorized row.
pub const TAIL_MASS: f64 = 1e-9;
/// Widest factorized alphabet.
pub const MAX_ALPHABET: usize = 4096;
pub const SCALE_LEVELS: usize = 64;
pub const SCALE_MAX: f64 = 256.0;
/// Gaussian rows cover `±ceil(GAUSS_SPAN·σ)`.
const GAUSS_SPAN: f64 = 8.0;
const SYMBOL_LIMIT: f64 = i16::MAX as f64;

/// What the codec needs from a model.
pub trait ImageCodec: Sync {
    fn arch(&self) -> &Architecture;
    fn lambda(&self) -> f64;
    /// 0 for the float model.
    fn bit_width(&self) -> u32;
    /// Identifies the model in stream headers.
    fn digest(&self) -> [u8; 8];
    /// Integer latent `Ŷ` of an image batch.
    fn latents(&self, x: &Tensor) -> Result<Tensor>;
    fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor>;
    fn hyper_latent(&self, y_hat: &Tensor) -> Result<Option<Tensor>>;
    fn scales(&self, z_hat: &Tensor) -> Result<Tensor>;
    /// `[C, 6]` mixture parameters of the factorized model.
    fn entropy(&self) -> &Tensor;
    fn hyper_entropy(&self) -> Option<&Tensor>;
    /// Model bits of `Ŷ` (and its hyper-latent).
    fn estimate_rate(&self, y_hat: &Tensor) -> Result<f64>;
}

impl ImageCodec for LicModel {
    fn arch(&self) -> &Architecture {
        &self.arch
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn bit_width(&self) -> u32 {
        0
    }
    fn digest(&self) -> [u8; 8] {
        digest64(&Container::float(self.clone()).to_bytes())
    }
    fn latents(&self, x: &Tensor) -> Result<Tensor> {
        // the escape path carries 16-bit values
        Ok(self
            .analyze(x)?
            .map(|v| v.round().clamp(-SYMBOL_LIMIT - 1.0, SYMBOL_LIMIT)))
    }
    fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        LicModel::synthesize(self, y_hat)
    }
    fn hyper_latent(&self, y_hat: &Tensor) -> Result<Option<Tensor>> {
        Ok(LicModel::hyper_latent(self, y_hat)?
            .map(|z| z.map(|v| v.clamp(-SYMBOL_LIMIT - 1.0, SYMBOL_LIMIT))))
    }
    fn scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.hyper_scales(z_hat)
    }
    fn entropy(&self) -> &Tensor {
        &self.entropy
    }
    fn hyper_entropy(&self) -> Option<&Tensor> {
        self.hyper_entropy.as_ref()
    }
    fn estimate_rate(&self, y_hat: &Tensor) -> Result<f64> {
        LicModel::estimate_rate(self, y_hat)
    }
}

impl ImageCodec for QuantizedModel {
    fn arch(&self) -> &Architecture {
        &self.float.arch
    }
    fn lambda(&self) -> f64 {
        self.float.lambda
    }
    fn bit_width(&self) -> u32 {
        self.bit_width
    }
    fn digest(&self) -> [u8; 8] {
        digest64(&self.to_container(Vec::new()).to_bytes())
    }
    fn latents(&self, x: &Tensor) -> Result<Tensor> {
        self.integer_analyze(x)
    }
    fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.integer_synthesize(y_hat)
    }
    fn hyper_latent(&self, y_hat: &Tensor) -> Result<Option<Tensor>> {
        self.integer_hyper_latent(y_hat)
    }
    fn scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.integer_scales(z_hat)
    }
    fn entropy(&self) -> &Tensor {
        &self.float.entropy
    }
    fn hyper_entropy(&self) -> Option<&Tensor> {
        self.float.hyper_entropy.as_ref()
    }
    fn estimate_rate(&self, y_hat: &Tensor) -> Result<f64> {
        match self.integer_hyper_latent(y_hat)? {
            None => Ok(factorized_bits(y_hat, &self.float.entropy)?
                .data()
                .iter()
                .sum()),
            Some(z) => {
                let he = self
                    .float
                    .hyper_entropy
                    .as_ref()
                    .ok_or_else(|| Error::param("hyperprior without hyper entropy"))?;
                let zb: f64 = factorized_bits(&z, he)?.data().iter().sum();
                let yb: f64 = gaussian_bits(y_hat, &self.integer_scales(&z)?)?
                    .data()
                    .iter()
                    .sum();
                Ok(zb + yb)
            }
        }
    }
}

/// Value with cumulative mass `p` under a mixture, by bisection.
fn mixture_quantile(m: &Mixture<'_>, p: f64) -> f64 {
    let (mut lo, mut hi) = (-SYMBOL_LIMIT, SYMBOL_LIMIT);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if m.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One row per channel of a `[C, 6]` mixture table.
pub fn factorized_table(params: &Tensor) -> Result<CdfTable> {
    let per = params.shape()[1];
    let rows = params
        .data()
        .chunks(per)
        .map(|p| {
            let m = Mixture::new(p);
            let mut lo = mixture_quantile(&m, TAIL_MASS).floor() as i64;
            let mut hi = mixture_quantile(&m, 1.0 - TAIL_MASS).ceil() as i64;
            if (hi - lo + 1) as usize > MAX_ALPHABET {
                let mid = mixture_quantile(&m, 0.5).round() as i64;
                lo = mid - MAX_ALPHABET as i64 / 2;
                hi = lo + MAX_ALPHABET as i64 - 1;
            }
            let pmf: Vec<f64> = (lo..=hi).map(|v| m.bin_probability(v as f64)).collect();
            CdfRow::from_frequencies(lo as i32, &quantize_pmf(&pmf, true)?, true)
        })
        .collect::<Result<_>>()?;
    Ok(CdfTable { rows })
}

/// Log-spaced Gaussian scales from the lower bound to [`SCALE_MAX`].
pub fn scale_levels() -> Vec<f64> {
    let ratio = (SCALE_MAX / SCALE_LOWER_BOUND).ln() / (SCALE_LEVELS - 1) as f64;
    (0..SCALE_LEVELS)
        .map(|i| SCALE_LOWER_BOUND * (ratio * i as f64).exp())
        .collect()
}

/// Table row for scale `sigma` (nearest level in the log domain).
pub fn scale_index(sigma: f64) -> usize {
    let ratio = (SCALE_MAX / SCALE_LOWER_BOUND).ln() / (SCALE_LEVELS - 1) as f64;
    let t = (sigma.max(SCALE_LOWER_BOUND) / SCALE_LOWER_BOUND).ln() / ratio;
    if t.is_finite() {
        (t.round() as usize).min(SCALE_LEVELS - 1)
    } else {
        SCALE_LEVELS - 1
    }
}

pub fn gaussian_table() -> Result<CdfTable> {
    let rows = scale_levels()
        .into_iter()
        .map(|s| {
            let r = (GAUSS_SPAN * s).ceil() as i32;
            let pmf: Vec<f64> = (-r..=r)
                .map(|v| gaussian_bin_probability(f64::from(v), s))
                .collect();
            CdfRow::from_frequencies(-r, &quantize_pmf(&pmf, true)?, true)
        })
        .collect::<Result<_>>()?;
    Ok(CdfTable { rows })
}

fn symbols(t: &Tensor) -> Vec<i32> {
    t.data().iter().map(|&v| v as i32).collect()
}

/// Row of each element of an `[1, C, h, w]` tensor under a per-channel table.
fn channel_rows(shape: &[usize]) -> Vec<usize> {
    let plane: usize = shape[2..].iter().product();
    (0..shape[1])
        .flat_map(|c| std::iter::repeat_n(c, plane))
        .collect()
}

/// A model with its coding tables.
pub struct ImageCoder<'a> {
    model: &'a dyn ImageCodec,
    digest: [u8; 8],
    /// Table of `Ŷ` without a hyperprior, of `Ẑ` with one.
    factorized: CdfTable,
    gaussian: Option<CdfTable>,
}

impl<'a> ImageCoder<'a> {
    pub fn new(model: &'a dyn ImageCodec) -> Result<Self> {
        let (factorized, gaussian) = match model.hyper_entropy() {
            Some(h) => (factorized_table(h)?, Some(gaussian_table()?)),
            None => (factorized_table(model.entropy())?, None),
        };
        Ok(Self {
            model,
            digest: model.digest(),
            factorized,
            gaussian,
        })
    }

    pub fn model(&self) -> &dyn ImageCodec {
        self.model
    }

    fn latent_shape(&self, width: usize, height: usize) -> [usize; 4] {
        [
            1,
            self.model.arch().latent_channels,
            height / DOWNSAMPLING,
            width / DOWNSAMPLING,
        ]
    }

    fn hyper_shape(&self, width: usize, height: usize) -> Result<[usize; 4]> {
        let arch = self.model.arch();
        let [_, _, mut h, mut w] = self.latent_shape(width, height);
        for spec in &arch.layers[arch.range(Role::HyperEncoder)] {
            h = spec.geometry().output_len(h, spec.kernel)?;
            w = spec.geometry().output_len(w, spec.kernel)?;
        }
        Ok([1, arch.hyper_channels, h, w])
    }

    fn gaussian_rows(&self, z_hat: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .model
            .scales(z_hat)?
            .data()
            .iter()
            .map(|&s| scale_index(s))
            .collect())
    }

    /// Latent of one image and the estimated bits for it.
    pub fn analyze(&self, image: &Image) -> Result<(Tensor, f64)> {
        let y = self.model.latents(&image.to_tensor())?;
        let bits = self.model.estimate_rate(&y)?;
        Ok((y, bits))
    }

    /// Stream header for an image coded by this model.
    pub fn header(&self, image: &Image, lambda_index: u8) -> Result<Header> {
        let (width, height) = (u16::try_from(image.width), u16::try_from(image.height));
        let (Ok(width), Ok(height)) = (width, height) else {
            return Err(Error::param("image dimensions exceed 16 bits"));
        };
        Ok(Header {
            width,
            height,
            lambda_index,
            model_digest: self.digest,
            bit_width: self.model.bit_width() as u8,
        })
    }

    pub fn compress(&self, image: &Image, lambda_index: u8) -> Result<Bitstream> {
        let y = self.model.latents(&image.to_tensor())?;
        self.encode_latent(&y, self.header(image, lambda_index)?)
    }

    /// Codes an integer latent `[1, C, h, w]`.
    pub fn encode_latent(&self, y_hat: &Tensor, header: Header) -> Result<Bitstream> {
        if y_hat.shape().len() != 4 || y_hat.shape()[0] != 1 {
            return Err(Error::shape("streams hold a single image"));
        }
        let mut enc = RangeEncoder::new();
        match &self.gaussian {
            None => encode_symbols(
                &mut enc,
                &symbols(y_hat),
                &channel_rows(y_hat.shape()),
                &self.factorized,
            )?,
            Some(gt) => {
                let z = self
                    .model
                    .hyper_latent(y_hat)?
                    .ok_or_else(|| Error::param("hyperprior model gave no hyper-latent"))?;
                encode_symbols(
                    &mut enc,
                    &symbols(&z),
                    &channel_rows(z.shape()),
                    &self.factorized,
                )?;
                encode_symbols(&mut enc, &symbols(y_hat), &self.gaussian_rows(&z)?, gt)?;
            }
        }
        Ok(Bitstream {
            header,
            payload: enc.finish(),
        })
    }

    /// Recovers the integer latent of a stream.
    pub fn decode_latent(&self, stream: &Bitstream) -> Result<Tensor> {
        let h = &stream.header;
        if h.model_digest != self.digest || u32::from(h.bit_width) != self.model.bit_width() {
            return Err(Error::CorruptStream(
                "stream was produced by a different model".into(),
            ));
        }
        let (w, hgt) = (usize::from(h.width), usize::from(h.height));
        if w == 0 || hgt == 0 || w % DOWNSAMPLING != 0 || hgt % DOWNSAMPLING != 0 {
            return Err(Error::CorruptStream(format!(
                "unsupported image size {w}x{hgt}"
            )));
        }
        let ys = self.latent_shape(w, hgt);
        let mut dec = RangeDecoder::new(&stream.payload)?;
        let to_tensor = |shape: &[usize], v: Vec<i32>| {
            Tensor::new(shape.to_vec(), v.into_iter().map(f64::from).collect())
        };
        match &self.gaussian {
            None => {
                let v = decode_symbols(&mut dec, &channel_rows(&ys), &self.factorized)?;
                to_tensor(&ys, v)
            }
            Some(gt) => {
                let zs = self.hyper_shape(w, hgt)?;
                let z = to_tensor(
                    &zs,
                    decode_symbols(&mut dec, &channel_rows(&zs), &self.factorized)?,
                )?;
                let v = decode_symbols(&mut dec, &self.gaussian_rows(&z)?, gt)?;
                to_tensor(&ys, v)
            }
        }
    }

    pub fn decompress(&self, stream: &Bitstream) -> Result<Image> {
        let y = self.decode_latent(stream)?;
        Image::from_tensor(&self.model.synthesize(&y)?)
    }
}
