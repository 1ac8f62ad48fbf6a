use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Architecture, DOWNSAMPLING};
use super::dataset::{batch, Image};
use super::model::{forward, rd_per_sample, FloatStages, LicModel, RoundMode};
use crate::error::{Error, Result};
use crate::tensor::{adam_step_per_tensor, AdamState, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the entropy-model parameters.
    pub entropy_lr: f64,
    /// Fraction of the run after which both rates drop tenfold.
    pub decay_at: f64,
    pub seed: u64,
    pub hyperprior: bool,
    /// Side of the random square training crops (a multiple of the
    /// downsampling factor, capped by the image size), drawn under random flips
    /// and transpositions. 0 trains on whole images under random flips.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            entropy_lr: 1e-2,
            decay_at: 0.8,
            seed: 0,
            hyperprior: false,
            crop: 0,
        }
    }
}

/// Minimum dataset size accepted by [`train_float`].
pub const MIN_TRAIN_IMAGES: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training-batch loss per step.
    pub curve: Vec<f64>,
}

/// A random crop under one of the eight flips and transpositions of the square.
/// With `crop == 0` the whole image under one of the four flips.
fn augmented<R: Rng>(img: &Image, crop: usize, rng: &mut R) -> Result<Image> {
    if crop == 0 {
        return Ok(match rng.gen_range(0..4u32) {
            1 => img.flip_horizontal(),
            2 => img.flip_vertical(),
            3 => img.flip_horizontal().flip_vertical(),
            _ => img.clone(),
        });
    }
    let (w, h) = (crop.min(img.width), crop.min(img.height));
    let (x0, y0) = (
        rng.gen_range(0..=img.width.saturating_sub(w)),
        rng.gen_range(0..=img.height.saturating_sub(h)),
    );
    let mut out = img.crop(x0, y0, w, h)?;
    let code = rng.gen_range(0..8u32);
    if code & 1 != 0 {
        out = out.flip_horizontal();
    }
    if code & 2 != 0 {
        out = out.flip_vertical();
    }
    if code & 4 != 0 && out.width == out.height {
        out = out.transpose();
    }
    Ok(out)
}

/// Trains a float codec on `dataset` with Adam and noise rounding of the latents.
pub fn train_float(
    dataset: &[Image],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(LicModel, TrainReport)> {
    if dataset.len() < MIN_TRAIN_IMAGES {
        return Err(Error::param(format!(
            "training needs at least {MIN_TRAIN_IMAGES} images, got {}",
            dataset.len()
        )));
    }
    if !cfg.crop.is_multiple_of(DOWNSAMPLING) {
        return Err(Error::param(format!(
            "crop side {} is not a multiple of {DOWNSAMPLING}",
            cfg.crop
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut model = LicModel::new(Architecture::toy(cfg.hyperprior), lambda, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_eed0_f7a1_u64);
    let mut adam = AdamState::for_tensors(model.params());
    let n_entropy = 1 + usize::from(cfg.hyperprior);
    let mut report = TrainReport::default();
    let decay_step = (cfg.steps as f64 * cfg.decay_at) as usize;

    for step in 0..cfg.steps {
        let picks: Vec<Image> = (0..cfg.batch_size)
            .map(|_| {
                let img = &dataset[rng.gen_range(0..dataset.len())];
                augmented(img, cfg.crop, &mut rng)
            })
            .collect::<Result<_>>()?;
        let x = batch(&picks.iter().collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let (loss, vars) = {
            let mut st = FloatStages::new(&mut g, &model, true, RoundMode::Noise, Some(&mut rng));
            let xv = g.constant(x);
            let trace = forward(&mut g, &mut st, xv)?;
            let j = rd_per_sample(&mut g, xv, trace.x_hat, trace.bits, lambda)?;
            (g.mean(j), st.vars.all())
        };
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {value} at step {step} (lambda {lambda})"
            )));
        }
        report.curve.push(value);

        let grads = g.backward(loss)?;
        let flat: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.params())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect();
        let decay = if step >= decay_step { 0.1 } else { 1.0 };
        let mut params = model.params_mut();
        let split = params.len() - n_entropy;
        let lrs: Vec<f64> = (0..params.len())
            .map(|i| if i < split { cfg.lr } else { cfg.entropy_lr } * decay)
            .collect();
        let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
        adam_step_per_tensor(&mut params, &refs, &mut adam, &lrs)?;
    }

    for p in model.params_mut() {
        p.snap_to_f32();
    }
    if !model.is_finite() {
        return Err(Error::Numeric("trained parameters are not finite".into()));
    }
    model.steps = cfg.steps as u64;
    Ok((model, report))
}
