use std::fmt::Write as _;
use std::time::Instant;

use super::ops::{inverse_rectified_sigmoid, ChannelQ, RoundingState};
use super::params::{
    init_gridsearch, init_minmax, BiasMode, CalibConfig, Granularity, InitMethod, LayerQuantParams,
    Objective, RangeStats, Rounding,
};
use super::quantized::{
    consumes_latent, plan_bias, ActQuant, LayerQuant, QuantStages, QuantizedModel,
};
use crate::error::{Error, Result};
use crate::licnet::dataset::batch;
use crate::licnet::model::{
    decoder_from, encoder_from, rate_from, rd_per_sample, RoundSite, Stages,
};
use crate::licnet::{Image, LicModel, Role};
use crate::tensor::{adam_step_per_tensor, conv_forward, AdamState, Graph, Tensor, Var};

/// Fraction of the steps before the rounding regularizer switches on.
const REG_WARMUP: f64 = 0.2;
const N_MIN: f64 = 1e-2;
const N_MAX: f64 = 4.0;

/// `L_task = (Ĵ - J0)²`.
pub fn task_loss(j_hat: f64, j0: f64) -> f64 {
    (j_hat - j0).powi(2)
}

/// `L_lq = Σ(out_f - out_q)² / B + λ_reg·Σ(1 - |2h(V) - 1|^β)` for
/// activations `[B, C, H, W]`.
pub fn layer_loss(
    out_f: &Tensor,
    out_q: &Tensor,
    v: Option<&Tensor>,
    beta: f64,
    lambda_reg: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(out_f.clone());
    let q = g.constant(out_q.clone());
    let mut loss = reconstruction(&mut g, f, q)?;
    if let Some(v) = v {
        let vv = g.constant(v.clone());
        let r = g.rounding_regularizer(vv, beta);
        let r = g.mul_scalar(r, lambda_reg);
        loss = g.add(loss, r)?;
    }
    g.value(loss).item()
}

fn reconstruction(g: &mut Graph, out_f: Var, out_q: Var) -> Result<Var> {
    let shape = g.shape(out_f).to_vec();
    let positions = shape[0];
    let d = g.sub(out_q, out_f)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.mul_scalar(s, 1.0 / positions.max(1) as f64))
}

/// Per-layer outcome of a calibration run.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub index: usize,
    pub role: Role,
    /// Objective of the frozen initial and final parameters (no regularizer).
    pub init_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub wall_s: f64,
    /// The optimization diverged and the initial parameters were kept.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibReport {
    pub layers: Vec<LayerReport>,
}

impl CalibReport {
    pub fn total_s(&self) -> f64 {
        self.layers.iter().map(|l| l.wall_s).sum()
    }

    /// Tab-separated text, one row per layer.
    pub fn to_text(&self) -> String {
        let mut s = String::from("index\trole\tinit_loss\tfinal_loss\tsteps\twall_s\tstatus\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{}\t{:?}\t{:.9e}\t{:.9e}\t{}\t{:.3}\t{}",
                l.index,
                l.role,
                l.init_loss,
                l.final_loss,
                l.steps,
                l.wall_s,
                if l.flagged { "restored" } else { "ok" }
            );
        }
        s
    }
}

/// Constants of the pipeline around the layer being calibrated.
struct LayerContext {
    index: usize,
    input: Tensor,
    out_f: Tensor,
    y_hat: Tensor,
    z_hat: Option<Tensor>,
    x_hat: Tensor,
    bits: Tensor,
    act: InputQuant,
}

/// Input quantizer being calibrated, or a fixed one.
#[derive(Clone, Debug)]
enum InputQuant {
    Learned(RangeStats),
    Fixed(ActQuant),
}

/// Sequential, progressively frozen calibration of a float codec.
pub struct Calibrator<'a> {
    model: &'a LicModel,
    cfg: CalibConfig,
    x: Tensor,
    j0: f64,
    float_inputs: Vec<Tensor>,
    frozen: Vec<LayerQuant>,
    report: CalibReport,
}

impl<'a> Calibrator<'a> {
    pub fn new(model: &'a LicModel, calib: &[Image], cfg: &CalibConfig) -> Result<Self> {
        cfg.validate()?;
        if calib.is_empty() {
            return Err(Error::param("calibration needs at least one image"));
        }
        let refs: Vec<&Image> = calib.iter().collect();
        let x = batch(&refs)?;

        // Float layers with hard latent rounding and 8-bit output pixels.
        let mut g = Graph::new();
        let mut st = QuantStages::new(&mut g, model, &[], cfg.bit_width).recording();
        let j0 = super::quantized::evaluate(&mut st, &mut g, &x, model.lambda)?.j;
        let float_inputs = st
            .record
            .take()
            .unwrap_or_default()
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::param("layer not reached by the forward pass")))
            .collect::<Result<Vec<_>>>()?;
        if !j0.is_finite() {
            return Err(Error::Numeric("float model gives a non-finite loss".into()));
        }
        Ok(Self {
            model,
            cfg: cfg.clone(),
            x,
            j0,
            float_inputs,
            frozen: Vec::new(),
            report: CalibReport::default(),
        })
    }

    /// Float-model loss on the calibration batch.
    pub fn j0(&self) -> f64 {
        self.j0
    }

    pub fn frozen(&self) -> &[LayerQuant] {
        &self.frozen
    }

    pub fn is_done(&self) -> bool {
        self.frozen.len() == self.model.layers.len()
    }

    /// Constants for layer `l` from the current quantized prefix.
    fn context(&self) -> Result<LayerContext> {
        let l = self.frozen.len();
        let mut g = Graph::new();
        let mut st =
            QuantStages::new(&mut g, self.model, &self.frozen, self.cfg.bit_width).recording();
        let xv = g.constant(self.x.clone());
        let trace = crate::licnet::model::forward(&mut g, &mut st, xv)?;
        let input = st
            .record
            .as_mut()
            .and_then(|r| r[l].take())
            .ok_or_else(|| Error::param("layer input missing"))?;
        let spec = self.model.arch.layers[l];
        let p = &self.model.layers[l];
        let mut out_f = conv_forward(&input, &p.weight, Some(&p.bias), spec.geometry())?;
        if spec.relu {
            out_f = out_f.map(|v| v.max(0.0));
        }
        let act = if consumes_latent(&self.model.arch, l) {
            InputQuant::Fixed(ActQuant::latent(self.cfg.bit_width))
        } else {
            InputQuant::Learned(RangeStats::of_activation(
                &self.float_inputs[l],
                self.cfg.granularity,
            ))
        };
        Ok(LayerContext {
            index: l,
            input,
            out_f,
            y_hat: g.value(trace.y_hat).clone(),
            z_hat: trace.z_hat.map(|z| g.value(z).clone()),
            x_hat: g.value(trace.x_hat).clone(),
            bits: g.value(trace.bits).clone(),
            act,
        })
    }

    fn init_params(&self, ctx: &LayerContext) -> Result<LayerQuantParams> {
        let p = &self.model.layers[ctx.index];
        let stats = match &ctx.act {
            InputQuant::Learned(s) => Some(s.clone()),
            InputQuant::Fixed(_) => None,
        };
        let mut params = match self.cfg.init {
            InitMethod::MinMax => init_minmax(
                &p.weight,
                &p.bias,
                stats,
                self.cfg.bit_width,
                self.cfg.granularity,
            )?,
            InitMethod::GridSearch => {
                let inputs = stats.as_ref().map(|_| &self.float_inputs[ctx.index]);
                init_gridsearch(
                    &p.weight,
                    &p.bias,
                    stats.clone(),
                    inputs,
                    self.cfg.bit_width,
                    self.cfg.granularity,
                )?
            }
        };
        if self.cfg.rounding == Rounding::Adaptive && self.cfg.steps > 0 {
            params.v = Some(self.rounding_offsets(ctx.index, &params)?);
        }
        Ok(params)
    }

    /// Offsets whose soft rounding reproduces the float weights at the
    /// current weight scales.
    fn rounding_offsets(&self, index: usize, params: &LayerQuantParams) -> Result<Tensor> {
        let w = &self.model.layers[index].weight;
        let wch = ChannelQ::resolve(&params.n_w, &params.w_stats, self.cfg.bit_width)?;
        let inner: usize = w.shape()[1..].iter().product();
        let v = w.data().iter().enumerate().map(|(i, &x)| {
            let r = x / wch[if wch.len() == 1 { 0 } else { i / inner }]
                .scale
                .value();
            inverse_rectified_sigmoid(r - r.floor())
        });
        Tensor::new(w.shape().to_vec(), v.collect())
    }

    fn input_quant(&self, ctx: &LayerContext, params: &LayerQuantParams) -> Result<ActQuant> {
        match &ctx.act {
            InputQuant::Fixed(a) => Ok(a.clone()),
            InputQuant::Learned(s) => Ok(ActQuant::from_channels(&ChannelQ::resolve(
                &params.n_x,
                s,
                self.cfg.bit_width,
            )?)),
        }
    }

    fn freeze(
        &self,
        ctx: &LayerContext,
        params: &LayerQuantParams,
        rounding: RoundingState,
    ) -> Result<LayerQuant> {
        let input = self.input_quant(ctx, params)?;
        let mut lq = LayerQuant::freeze(
            params,
            &self.model.layers[ctx.index],
            input,
            self.cfg.quantize_activations,
            self.cfg.bias,
            rounding,
        )?;
        let arch = &self.model.arch;
        if arch.layers[ctx.index].role == Role::HyperDecoder
            && ctx.index + 1 == arch.range(Role::HyperDecoder).end
        {
            let stats = RangeStats::of_activation(&ctx.out_f, Granularity::LayerWise);
            lq.output = Some(ActQuant::from_channels(&ChannelQ::resolve(
                &[1.0],
                &stats,
                self.cfg.bit_width,
            )?));
        }
        Ok(lq)
    }

    /// Everything downstream of the layer output `out_q`: the calibration
    /// objective without the rounding regularizer.
    fn objective(
        &self,
        g: &mut Graph,
        st: &mut QuantStages<'_>,
        ctx: &LayerContext,
        out_q: Var,
    ) -> Result<Var> {
        let out_f = g.constant(ctx.out_f.clone());
        let rec = reconstruction(g, out_f, out_q)?;
        if self.cfg.objective == Objective::TensorMse {
            return Ok(rec);
        }
        let l = ctx.index;
        let arch = &self.model.arch;
        let (x_hat, bits) = match arch.layers[l].role {
            Role::Encoder => {
                let y = encoder_from(g, st, l + 1, out_q)?;
                let y_hat = st.round(g, y, RoundSite::Latent)?;
                let ha = arch.range(Role::HyperEncoder).start;
                let (bits, _) = rate_from(g, st, ha, y_hat, y_hat, None)?;
                (decoder_from(g, st, 0, y_hat)?, bits)
            }
            Role::HyperEncoder | Role::HyperDecoder => {
                let y_hat = g.constant(ctx.y_hat.clone());
                let z_hat = ctx.z_hat.clone().map(|z| g.constant(z));
                let (bits, _) = rate_from(g, st, l + 1, out_q, y_hat, z_hat)?;
                (g.constant(ctx.x_hat.clone()), bits)
            }
            Role::Decoder => (
                decoder_from(g, st, l + 1, out_q)?,
                g.constant(ctx.bits.clone()),
            ),
        };
        let x = g.constant(self.x.clone());
        let j = rd_per_sample(g, x, x_hat, bits, self.model.lambda)?;
        let j = g.mean(j);
        let d = g.add_scalar(j, -self.j0);
        let task = g.square(d);
        let task = g.mul_scalar(task, self.cfg.lambda_t);
        g.add(task, rec)
    }

    /// Objective of a frozen candidate for the current layer.
    fn frozen_objective(&self, ctx: &LayerContext, lq: LayerQuant) -> Result<f64> {
        let mut quant = self.frozen.clone();
        quant.push(lq);
        let mut g = Graph::new();
        let mut st = QuantStages::new(&mut g, self.model, &quant, self.cfg.bit_width);
        let x = g.constant(ctx.input.clone());
        let out_q = st.layer(&mut g, ctx.index, x)?;
        let loss = if self.cfg.objective == Objective::TensorMse {
            self.tensor_mse(&mut g, ctx, &quant[ctx.index])?
        } else {
            self.objective(&mut g, &mut st, ctx, out_q)?
        };
        g.value(loss).item()
    }

    /// Per-tensor quantization error of a frozen layer.
    fn tensor_mse(&self, g: &mut Graph, ctx: &LayerContext, lq: &LayerQuant) -> Result<Var> {
        let p = &self.model.layers[ctx.index];
        let mut total = 0.0;
        let mut add = |a: &Tensor, b: &Tensor| {
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.len().max(1) as f64;
        };
        add(&p.weight, &lq.weight_real()?);
        add(&p.bias, &lq.bias_real());
        if lq.quantize_input && matches!(ctx.act, InputQuant::Learned(_)) {
            add(&ctx.input, &lq.input.fake(&ctx.input, lq.bit_width));
        }
        Ok(g.constant(Tensor::scalar(total)))
    }

    /// One optimization step graph; returns the loss and the parameter variables.
    fn step_graph(
        &self,
        g: &mut Graph,
        ctx: &LayerContext,
        params: &LayerQuantParams,
        beta: Option<f64>,
    ) -> Result<(Var, Vec<Var>)> {
        let bits = self.cfg.bit_width;
        let p = &self.model.layers[ctx.index];
        let spec = self.model.arch.layers[ctx.index];
        let mut st = QuantStages::new(g, self.model, &self.frozen, bits);

        let x = g.constant(ctx.input.clone());
        let n_x = g.param(Tensor::new(
            vec![params.n_x.len().max(1)],
            pad_one(&params.n_x),
        )?);
        let (x_hat, x_channels) = match (&ctx.act, self.cfg.quantize_activations) {
            (InputQuant::Learned(stats), q) => {
                let ch = ChannelQ::resolve(&params.n_x, stats, bits)?;
                let xh = if q {
                    let axis = (ch.len() > 1).then_some(1);
                    g.fake_quant(x, n_x, None, axis, ch.clone(), bits, RoundingState::Nearest)
                } else {
                    x
                };
                (xh, ch)
            }
            (InputQuant::Fixed(a), q) => {
                let xh = if q {
                    g.constant(a.fake(&ctx.input, bits))
                } else {
                    x
                };
                (xh, a.channels())
            }
        };

        let w = g.constant(p.weight.clone());
        let n_w = g.param(Tensor::new(vec![params.n_w.len()], params.n_w.clone())?);
        let v = params.v.as_ref().map(|v| g.param(v.clone()));
        let wch = ChannelQ::resolve(&params.n_w, &params.w_stats, bits)?;
        let w_axis = (wch.len() > 1).then_some(0);
        let state = if v.is_some() {
            RoundingState::Soft
        } else {
            RoundingState::Nearest
        };
        let w_hat = g.fake_quant(w, n_w, v, w_axis, wch.clone(), bits, state);

        let b = g.constant(p.bias.clone());
        let n_b = g.param(Tensor::scalar(params.n_b));
        let mut bch = ChannelQ::resolve(&[params.n_b], &params.b_stats, bits)?[0];
        let input = ActQuant::from_channels(&x_channels);
        let group = input.bias_group();
        let s_w: Vec<_> = wch.iter().map(|c| c.scale).collect();
        let plan = plan_bias(
            p.bias.data(),
            &bch,
            bits,
            &s_w,
            input.scales[group],
            self.cfg.bias,
        )?;
        if self.cfg.bias == BiasMode::Int32 {
            bch.dsdn = 0.0;
        }
        let b_hat = g.fake_quant_bias(
            b,
            n_b,
            Tensor::new(vec![plan.real.len()], plan.real)?,
            bch,
            bits,
        );

        let y = g.conv2d(x_hat, w_hat, Some(b_hat), spec.geometry())?;
        let out_q = if spec.relu { g.relu(y) } else { y };

        let mut loss = match self.cfg.objective {
            Objective::RateDistortion => self.objective(g, &mut st, ctx, out_q)?,
            Objective::TensorMse => {
                let mut terms = vec![g.mse(w_hat, w)?, g.mse(b_hat, b)?];
                if self.cfg.quantize_activations && matches!(ctx.act, InputQuant::Learned(_)) {
                    terms.push(g.mse(x_hat, x)?);
                }
                let mut t = terms[0];
                for &u in &terms[1..] {
                    t = g.add(t, u)?;
                }
                t
            }
        };
        if let (Some(v), Some(beta)) = (v, beta) {
            let r = g.rounding_regularizer(v, beta);
            let r = g.mul_scalar(r, self.cfg.lambda_reg);
            loss = g.add(loss, r)?;
        }
        let mut vars = vec![n_w, n_x, n_b];
        vars.extend(v);
        Ok((loss, vars))
    }

    /// Two phases share the step budget. The multipliers are fitted first with
    /// nearest rounding; then the weight scales are held and the rounding
    /// offsets are learned from the fractional parts at those scales, with the
    /// regularizer on. Moving `N_w` under soft offsets is invisible to the
    /// soft loss but not to the hard-rounded result.
    ///
    /// Returns the candidates to freeze: the end of the second phase with hard
    /// offsets, preceded by the end of the first with nearest rounding.
    fn optimize(
        &self,
        ctx: &LayerContext,
        init: &LayerQuantParams,
    ) -> Result<Vec<(LayerQuantParams, RoundingState)>> {
        let adaptive = init.v.is_some();
        let mut params = LayerQuantParams {
            v: None,
            ..init.clone()
        };
        let mut n = vec![
            Tensor::new(vec![params.n_w.len()], params.n_w.clone())?,
            Tensor::new(vec![params.n_x.len().max(1)], pad_one(&params.n_x))?,
            Tensor::scalar(params.n_b),
        ];
        let mut lrs = vec![self.cfg.lr; 3];
        let mut adam_n = AdamState::for_tensors(n.iter());
        let mut v_state: Option<(Tensor, AdamState)> = None;
        let switch = if adaptive {
            (self.cfg.steps as f64 * REG_WARMUP).ceil() as usize
        } else {
            self.cfg.steps
        };
        let mut out = Vec::new();
        for step in 0..self.cfg.steps {
            if step == switch {
                out.push((params.clone(), RoundingState::Nearest));
                let v = self.rounding_offsets(ctx.index, &params)?;
                let adam = AdamState::for_tensors([&v]);
                v_state = Some((v, adam));
                lrs[0] = 0.0;
            }
            params.v = v_state.as_ref().map(|(v, _)| v.clone());
            let mut g = Graph::new();
            let beta = params.v.is_some().then(|| self.cfg.beta(step));
            let (loss, vars) = self.step_graph(&mut g, ctx, &params, beta)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite calibration loss at layer {}",
                    ctx.index
                )));
            }
            let grads = g.backward(loss)?;
            let gs: Vec<Vec<f64>> = vars
                .iter()
                .zip(&n)
                .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
                .collect();
            let gref: Vec<&[f64]> = gs.iter().map(Vec::as_slice).collect();
            let mut prefs: Vec<&mut Tensor> = n.iter_mut().collect();
            adam_step_per_tensor(&mut prefs, &gref, &mut adam_n, &lrs)?;
            for t in &mut n {
                t.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = x.clamp(N_MIN, N_MAX));
            }
            if let Some((v, adam)) = v_state.as_mut() {
                let gv = grads.get_or_zeros(vars[3], v.len());
                adam_step_per_tensor(&mut [v], &[&gv], adam, &[self.cfg.lr_v])?;
            }
            params.n_w = n[0].data().to_vec();
            if !params.n_x.is_empty() {
                params.n_x = n[1].data().to_vec();
            }
            params.n_b = n[2].data()[0];
        }
        params.v = v_state.map(|(v, _)| v);
        out.push((
            params,
            if adaptive {
                RoundingState::Hard
            } else {
                RoundingState::Nearest
            },
        ));
        Ok(out)
    }

    /// Calibrates the next unfrozen layer and freezes it.
    pub fn calibrate_next(&mut self) -> Result<&LayerReport> {
        if self.is_done() {
            return Err(Error::param("every layer is already calibrated"));
        }
        let start = Instant::now();
        let ctx = self.context()?;
        let init = self.init_params(&ctx)?;
        let init_q = self.freeze(&ctx, &init, RoundingState::Nearest)?;
        let init_loss = self.frozen_objective(&ctx, init_q.clone())?;
        let mut chosen = (init_q, init_loss);
        let mut flagged = false;
        if self.cfg.steps > 0 {
            match self.optimize(&ctx, &init) {
                Ok(candidates) => {
                    for (p, state) in candidates {
                        let q = self.freeze(&ctx, &p, state)?;
                        let loss = self.frozen_objective(&ctx, q.clone())?;
                        if !loss.is_finite() {
                            flagged = true;
                        } else if loss <= chosen.1 {
                            chosen = (q, loss);
                        }
                    }
                }
                Err(Error::Numeric(_)) => flagged = true,
                Err(e) => return Err(e),
            }
        }
        let (lq, final_loss) = chosen;
        self.frozen.push(lq);
        self.report.layers.push(LayerReport {
            index: ctx.index,
            role: self.model.arch.layers[ctx.index].role,
            init_loss,
            final_loss,
            steps: self.cfg.steps,
            wall_s: start.elapsed().as_secs_f64(),
            flagged,
        });
        Ok(self.report.layers.last().expect("just pushed"))
    }

    pub fn finish(self) -> Result<(QuantizedModel, CalibReport)> {
        if !self.is_done() {
            return Err(Error::param("calibration stopped before the last layer"));
        }
        let q = QuantizedModel {
            float: self.model.clone(),
            bit_width: self.cfg.bit_width,
            layers: self.frozen,
        };
        Ok((q, self.report))
    }
}

fn pad_one(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        vec![1.0]
    } else {
        v.to_vec()
    }
}

/// Calibrates every layer in order: encoder, hyper-encoder, hyper-decoder, decoder.
pub fn calibrate_model(
    model: &LicModel,
    calib: &[Image],
    cfg: &CalibConfig,
) -> Result<(QuantizedModel, CalibReport)> {
    let mut c = Calibrator::new(model, calib, cfg)?;
    while !c.is_done() {
        c.calibrate_next()?;
    }
    c.finish()
}

/// Per-tensor MSE-optimized scales with nearest rounding.
pub fn mse_ptq(
    model: &LicModel,
    calib: &[Image],
    cfg: &CalibConfig,
) -> Result<(QuantizedModel, CalibReport)> {
    let cfg = CalibConfig {
        rounding: Rounding::Nearest,
        objective: Objective::TensorMse,
        ..cfg.clone()
    };
    calibrate_model(model, calib, &cfg)
}

/// Min-Max scales, nearest rounding, no optimization.
pub fn minmax_baseline(
    model: &LicModel,
    calib: &[Image],
    cfg: &CalibConfig,
) -> Result<QuantizedModel> {
    let cfg = CalibConfig {
        steps: 0,
        rounding: Rounding::Nearest,
        init: InitMethod::MinMax,
        ..cfg.clone()
    };
    Ok(calibrate_model(model, calib, &cfg)?.0)
}
