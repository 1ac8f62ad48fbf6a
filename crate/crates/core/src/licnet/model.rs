use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Architecture, Role, DOWNSAMPLING};
use super::entropy_model::{init_mixture_params, SCALE_LOWER_BOUND};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weight `[C_out, C_in, K, K]` and bias `[C_out]` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The float codec: transforms, entropy-model parameters and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct LicModel {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
    /// Factorized model of the latent, `[C, 6]`; unused when the hyperprior is on.
    pub entropy: Tensor,
    /// Factorized model of the hyper-latent, `[N, 6]`.
    pub hyper_entropy: Option<Tensor>,
    pub lambda: f64,
    pub seed: u64,
    pub steps: u64,
}

/// One operating point: bits per pixel, MSE on the 0-255 scale and `J = λ·D + bpp`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub distortion: f64,
    pub j: f64,
}

impl RdPoint {
    pub fn new(bpp: f64, distortion: f64, lambda: f64) -> Self {
        Self {
            bpp,
            distortion,
            j: lambda * distortion + bpp,
        }
    }
}

/// How latents become integers in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundMode {
    /// Additive uniform noise (training proxy).
    Noise,
    /// Rounding with a straight-through gradient.
    Hard,
}

/// Where a rounding happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundSite {
    Latent,
    HyperLatent,
}

/// Distortion weight of the R-D loss: MSE is measured on the 0-255 scale.
pub const PIXEL_RANGE_SQ: f64 = 255.0 * 255.0;

/// `J = λ·255²·MSE(X, X̂) + bits / pixels` with `X`, `X̂` on the 0-1 scale.
pub fn rd_loss(
    x: &Tensor,
    x_hat: &Tensor,
    bits: f64,
    lambda: f64,
    pixel_count: usize,
) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("rd_loss: image shapes differ"));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len().max(1) as f64;
    Ok(lambda * PIXEL_RANGE_SQ * mse + bits / pixel_count as f64)
}

/// Hooks that decide how each stage of the pipeline is evaluated. The float
/// model, the training loop and the quantization simulator differ only here.
pub trait Stages {
    fn arch(&self) -> &Architecture;
    /// Convolution, bias and activation of layer `index`.
    fn layer(&mut self, g: &mut Graph, index: usize, x: Var) -> Result<Var>;
    fn round(&mut self, g: &mut Graph, y: Var, site: RoundSite) -> Result<Var>;
    fn entropy(&self) -> Var;
    fn hyper_entropy(&self) -> Option<Var>;

    /// Last decoder activation to pixel intensities.
    fn reconstruct(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(g.clamp(x, 0.0, 1.0))
    }

    /// Hyper-decoder output to Gaussian scales.
    fn sigma(&mut self, g: &mut Graph, s: Var) -> Result<Var> {
        let sp = g.softplus(s);
        Ok(g.add_scalar(sp, SCALE_LOWER_BOUND))
    }
}

/// Model parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<(Var, Var)>,
    pub entropy: Var,
    pub hyper_entropy: Option<Var>,
}

impl ModelVars {
    /// Every trainable variable, in the order of [`LicModel::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.entropy);
        v.extend(self.hyper_entropy);
        v
    }
}

/// The plain float pipeline.
pub struct FloatStages<'a> {
    pub model: &'a LicModel,
    pub vars: ModelVars,
    pub mode: RoundMode,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> FloatStages<'a> {
    pub fn new(
        g: &mut Graph,
        model: &'a LicModel,
        trainable: bool,
        mode: RoundMode,
        rng: Option<&'a mut dyn RngCore>,
    ) -> Self {
        Self {
            model,
            vars: model.bind(g, trainable),
            mode,
            rng,
        }
    }
}

impl Stages for FloatStages<'_> {
    fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    fn layer(&mut self, g: &mut Graph, index: usize, x: Var) -> Result<Var> {
        let (w, b) = self.vars.layers[index];
        let spec = &self.model.arch.layers[index];
        let y = g.conv2d(x, w, Some(b), spec.geometry())?;
        Ok(if spec.relu { g.relu(y) } else { y })
    }

    fn round(&mut self, g: &mut Graph, y: Var, _site: RoundSite) -> Result<Var> {
        match (self.mode, self.rng.as_deref_mut()) {
            (RoundMode::Hard, _) => Ok(g.ste_round(y)),
            (RoundMode::Noise, Some(rng)) => Ok(g.noise_round(y, rng)),
            (RoundMode::Noise, None) => Err(Error::param("noise rounding needs a random source")),
        }
    }

    fn entropy(&self) -> Var {
        self.vars.entropy
    }

    fn hyper_entropy(&self) -> Option<Var> {
        self.vars.hyper_entropy
    }
}

/// Graph nodes of one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    pub y: Var,
    pub y_hat: Var,
    pub z_hat: Option<Var>,
    /// Bits per sample, `[B]`.
    pub bits: Var,
    pub x_hat: Var,
}

fn run_layers<S: Stages + ?Sized>(
    g: &mut Graph,
    st: &mut S,
    layers: std::ops::Range<usize>,
    mut x: Var,
) -> Result<Var> {
    for i in layers {
        x = st.layer(g, i, x)?;
    }
    Ok(x)
}

/// Encoder layers `start..` applied to `input` (the input of layer `start`).
pub fn encoder_from<S: Stages + ?Sized>(
    g: &mut Graph,
    st: &mut S,
    start: usize,
    input: Var,
) -> Result<Var> {
    let r = st.arch().range(Role::Encoder);
    run_layers(g, st, start.max(r.start)..r.end, input)
}

/// Decoder layers `start..` applied to `input`, then reconstruction.
pub fn decoder_from<S: Stages + ?Sized>(
    g: &mut Graph,
    st: &mut S,
    start: usize,
    input: Var,
) -> Result<Var> {
    let r = st.arch().range(Role::Decoder);
    let out = run_layers(g, st, start.max(r.start)..r.end, input)?;
    st.reconstruct(g, out)
}

/// Bits per sample of `y_hat`. With a hyperprior, `start` selects the first
/// hyper layer to evaluate and `input` is that layer's input; `z_hat` must be
/// supplied when starting inside the hyper-decoder.
pub fn rate_from<S: Stages + ?Sized>(
    g: &mut Graph,
    st: &mut S,
    start: usize,
    input: Var,
    y_hat: Var,
    z_hat: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let Some(hyper_entropy) = st.hyper_entropy() else {
        let entropy = st.entropy();
        let bits = g.factorized_bits(y_hat, entropy)?;
        return Ok((g.sum_rows(bits)?, None));
    };
    let ha = st.arch().range(Role::HyperEncoder);
    let hs = st.arch().range(Role::HyperDecoder);
    let (z_hat, s) = if start <= ha.end {
        let z = run_layers(g, st, start.max(ha.start)..ha.end, input)?;
        let z_hat = st.round(g, z, RoundSite::HyperLatent)?;
        (z_hat, run_layers(g, st, hs.clone(), z_hat)?)
    } else {
        let z_hat =
            z_hat.ok_or_else(|| Error::param("hyper-decoder start needs the hyper-latent"))?;
        (z_hat, run_layers(g, st, start..hs.end, input)?)
    };
    let zb = g.factorized_bits(z_hat, hyper_entropy)?;
    let zb = g.sum_rows(zb)?;
    let sigma = st.sigma(g, s)?;
    let yb = g.gaussian_bits(y_hat, sigma)?;
    let yb = g.sum_rows(yb)?;
    Ok((g.add(zb, yb)?, Some(z_hat)))
}

/// Full pipeline `X -> Y -> Ŷ -> (bits, X̂)`.
pub fn forward<S: Stages + ?Sized>(g: &mut Graph, st: &mut S, x: Var) -> Result<Trace> {
    check_image_shape(g.shape(x))?;
    let y = encoder_from(g, st, 0, x)?;
    let y_hat = st.round(g, y, RoundSite::Latent)?;
    let ha = st.arch().range(Role::HyperEncoder).start;
    let (bits, z_hat) = rate_from(g, st, ha, y_hat, y_hat, None)?;
    let x_hat = decoder_from(g, st, 0, y_hat)?;
    Ok(Trace {
        y,
        y_hat,
        z_hat,
        bits,
        x_hat,
    })
}

/// Per-sample `J_i = λ·255²·MSE_i + bits_i / pixels`, shape `[B]`.
pub fn rd_per_sample(g: &mut Graph, x: Var, x_hat: Var, bits: Var, lambda: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let pixels: usize = shape[1..].iter().product();
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d);
    let sse = g.sum_rows(sq)?;
    let dist = g.mul_scalar(sse, lambda * PIXEL_RANGE_SQ / pixels as f64);
    let rate = g.mul_scalar(bits, 1.0 / pixels as f64);
    g.add(dist, rate)
}

/// Summary of a batch forward pass: averaged bpp and 0-255 MSE.
pub fn rd_point(g: &Graph, x: Var, trace: &Trace, lambda: f64) -> RdPoint {
    let (xv, xh) = (g.value(x), g.value(trace.x_hat));
    let mse = xv
        .data()
        .iter()
        .zip(xh.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / xv.len() as f64;
    let bits: f64 = g.value(trace.bits).data().iter().sum();
    RdPoint::new(bits / xv.len() as f64, mse * PIXEL_RANGE_SQ, lambda)
}

pub(crate) fn check_image_shape(shape: &[usize]) -> Result<()> {
    match shape {
        &[_, 1, h, w] if h > 0 && w > 0 && h % DOWNSAMPLING == 0 && w % DOWNSAMPLING == 0 => Ok(()),
        _ => Err(Error::shape(format!(
            "image batch must be [B, 1, H, W] with H, W positive multiples of {DOWNSAMPLING}, got {shape:?}"
        ))),
    }
}

impl LicModel {
    /// Randomly initialized model (uniform He initialization, zero bias).
    pub fn new(arch: Architecture, lambda: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let bound = (6.0 / l.fan_in() as f64).sqrt();
                LayerParams {
                    weight: Tensor::from_fn(&l.weight_shape(), |_| rng.gen_range(-bound..bound)),
                    bias: Tensor::zeros(&[l.out_channels]),
                }
            })
            .collect();
        let hyper_entropy = arch
            .hyperprior()
            .then(|| init_mixture_params(arch.hyper_channels));
        Ok(Self {
            entropy: init_mixture_params(arch.latent_channels),
            hyper_entropy,
            arch,
            layers,
            lambda,
            seed,
            steps: 0,
        })
    }

    /// All weights and biases zero.
    pub fn zeroed(arch: Architecture, lambda: f64) -> Result<Self> {
        let mut m = Self::new(arch, lambda, 0)?;
        for l in &mut m.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        Ok(m)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias)))
            .collect();
        let entropy = put(&self.entropy);
        let hyper_entropy = self.hyper_entropy.as_ref().map(&mut put);
        ModelVars {
            layers,
            entropy,
            hyper_entropy,
        }
    }

    /// Mutable parameter list matching [`ModelVars::all`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.push(&mut self.entropy);
        v.extend(self.hyper_entropy.as_mut());
        v
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        v.push(&self.entropy);
        v.extend(self.hyper_entropy.as_ref());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Analysis transform `Y = g_a(X)`.
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        check_image_shape(x.shape())?;
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, RoundMode::Hard, None);
        let xv = g.constant(x.clone());
        let y = encoder_from(&mut g, &mut st, 0, xv)?;
        Ok(g.value(y).clone())
    }

    /// Synthesis transform `X̂ = clamp(g_s(Ŷ), 0, 1)`.
    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.check_latent(y_hat)?;
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, RoundMode::Hard, None);
        let yv = g.constant(y_hat.clone());
        let x = decoder_from(&mut g, &mut st, 0, yv)?;
        Ok(g.value(x).clone())
    }

    /// Estimated bits of `Ŷ` (plus the hyper-latent when present).
    pub fn estimate_rate(&self, y_hat: &Tensor) -> Result<f64> {
        self.check_latent(y_hat)?;
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, RoundMode::Hard, None);
        let yv = g.constant(y_hat.clone());
        let ha = self.arch.range(Role::HyperEncoder).start;
        let (bits, _) = rate_from(&mut g, &mut st, ha, yv, yv, None)?;
        Ok(g.value(bits).data().iter().sum())
    }

    /// Hyper-latent `Ẑ = round(h_a(Ŷ))` of a hyperprior model.
    pub fn hyper_latent(&self, y_hat: &Tensor) -> Result<Option<Tensor>> {
        if !self.arch.hyperprior() {
            return Ok(None);
        }
        self.check_latent(y_hat)?;
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, RoundMode::Hard, None);
        let yv = g.constant(y_hat.clone());
        let z = run_layers(&mut g, &mut st, self.arch.range(Role::HyperEncoder), yv)?;
        let z_hat = g.ste_round(z);
        Ok(Some(g.value(z_hat).clone()))
    }

    /// Gaussian scales for `Ŷ` predicted from `Ẑ`.
    pub fn hyper_scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, RoundMode::Hard, None);
        let zv = g.constant(z_hat.clone());
        let s = run_layers(&mut g, &mut st, self.arch.range(Role::HyperDecoder), zv)?;
        let sigma = st.sigma(&mut g, s)?;
        Ok(g.value(sigma).clone())
    }

    /// End-to-end R-D evaluation of an image batch.
    pub fn forward_rd<'a>(
        &'a self,
        x: &Tensor,
        mode: RoundMode,
        rng: Option<&'a mut dyn RngCore>,
    ) -> Result<(Tensor, RdPoint)> {
        let mut g = Graph::new();
        let mut st = FloatStages::new(&mut g, self, false, mode, rng);
        let xv = g.constant(x.clone());
        let trace = forward(&mut g, &mut st, xv)?;
        let point = rd_point(&g, xv, &trace, self.lambda);
        Ok((g.value(trace.x_hat).clone(), point))
    }

    fn check_latent(&self, y: &Tensor) -> Result<()> {
        match y.shape() {
            &[_, c, h, w] if c == self.arch.latent_channels && h > 0 && w > 0 => Ok(()),
            s => Err(Error::shape(format!(
                "latent must be [B, {}, h, w], got {s:?}",
                self.arch.latent_channels
            ))),
        }
    }
}
