//! Finite-difference checks of every differentiable operator. Each check runs
//! `CASES` random instances and returns the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdoq::calib::{ChannelQ, RangeStats, RoundingState};
use rdoq::geometry::ConvGeometry;
use rdoq::licnet::model::{forward, rd_per_sample, FloatStages};
use rdoq::licnet::{Architecture, LicModel, RoundMode};
use rdoq::tensor::{Graph, Tensor, Var};

use super::{gradcheck, project, random_tensor};

pub const TOL: f64 = 1e-4;
/// Random instances per operator.
pub const CASES: u64 = 20;

pub type Check = fn() -> f64;

/// Every operator check plus the full codec loss.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("add", || binary(10, |g, a, b| g.add(a, b).unwrap())),
        ("sub", || binary(11, |g, a, b| g.sub(a, b).unwrap())),
        ("mul", || binary(12, |g, a, b| g.mul(a, b).unwrap())),
        ("mul_scalar", || {
            unary(20, -2.0, 2.0, |g, x| g.mul_scalar(x, -1.7))
        }),
        ("add_scalar", || {
            unary(21, -2.0, 2.0, |g, x| g.add_scalar(x, 0.3))
        }),
        ("relu", || unary(22, -2.0, 2.0, |g, x| g.relu(x))),
        ("sigmoid", || unary(23, -4.0, 4.0, |g, x| g.sigmoid(x))),
        ("softplus", || unary(24, -4.0, 4.0, |g, x| g.softplus(x))),
        ("exp", || unary(25, -2.0, 2.0, |g, x| g.exp(x))),
        ("log", || unary(26, 0.2, 3.0, |g, x| g.log(x))),
        ("square", || unary(27, -2.0, 2.0, |g, x| g.square(x))),
        ("abs", || unary(28, -2.0, 2.0, |g, x| g.abs(x))),
        ("clamp", || {
            unary(29, -2.0, 2.0, |g, x| g.clamp(x, -0.9, 1.1))
        }),
        ("sum", || unary(30, -2.0, 2.0, |g, x| g.sum(x))),
        ("mean", || unary(31, -2.0, 2.0, |g, x| g.mean(x))),
        ("sum_rows", sum_rows),
        ("mse", || binary(33, |g, a, b| g.mse(a, b).unwrap())),
        ("conv2d", conv2d),
        ("conv2d_transpose", conv2d_transpose),
        ("factorized_bits", factorized_bits),
        ("gaussian_bits", gaussian_bits),
        ("rounding_regularizer", rounding_regularizer),
        ("fake_quant", fake_quant_offsets),
        ("codec_loss", full_codec_loss),
    ]
}

fn worst(errs: &[f64]) -> f64 {
    errs.iter().fold(0.0, |a, &e| a.max(e))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

/// An elementwise op on inputs drawn from `lo..hi`.
fn unary(seed: u64, lo: f64, hi: f64, op: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let x = random_tensor(&random_shape(&mut rng), &mut rng, lo, hi);
        let errs = gradcheck(&[x], |g, v| {
            let y = op(g, v[0]);
            project(g, y, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn binary(seed: u64, op: impl Fn(&mut Graph, Var, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let shape = random_shape(&mut rng);
        let a = random_tensor(&shape, &mut rng, -2.0, 2.0);
        let b = random_tensor(&shape, &mut rng, -2.0, 2.0);
        let errs = gradcheck(&[a, b], |g, v| {
            let y = op(g, v[0], v[1]);
            project(g, y, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn sum_rows() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let shape = [
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let x = random_tensor(&shape, &mut rng, -2.0, 2.0);
        let errs = gradcheck(&[x], |g, v| {
            let r = g.sum_rows(v[0]).unwrap();
            project(g, r, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn conv2d() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = 0.0f64;
    for case in 0..CASES as usize {
        let stride = 1 + case % 2;
        let k = [1, 3, 5][case % 3];
        let x = random_tensor(&[2, 3, 7, 6], &mut rng, -1.0, 1.0);
        let wt = random_tensor(&[4, 3, k, k], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[4], &mut rng, -1.0, 1.0);
        let errs = gradcheck(&[x, wt, b], |g, v| {
            let y = g
                .conv2d(v[0], v[1], Some(v[2]), ConvGeometry::forward(stride, k / 2))
                .unwrap();
            project(g, y, 9)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn conv2d_transpose() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = 0.0f64;
    for case in 0..CASES as usize {
        let stride = 1 + case % 2;
        let k = [2, 3, 4][case % 3];
        let pad = rng.gen_range(0..k.min(2));
        let x = random_tensor(&[2, 3, 4, 5], &mut rng, -1.0, 1.0);
        let wt = random_tensor(&[2, 3, k, k], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[2], &mut rng, -1.0, 1.0);
        let errs = gradcheck(&[x, wt, b], |g, v| {
            let y = g
                .conv2d(
                    v[0],
                    v[1],
                    Some(v[2]),
                    ConvGeometry::transposed(stride, pad),
                )
                .unwrap();
            project(g, y, 3)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn factorized_bits() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let c = rng.gen_range(1..4);
        // latents are integers plus noise in training; keep them off the bin edges
        let y = Tensor::from_fn(&[2, c, 2, 2], |_| {
            f64::from(rng.gen_range(-4..=4)) + rng.gen_range(-0.4..0.4)
        });
        let params = Tensor::from_fn(&[c, 6], |i| match i % 6 {
            0 | 1 => rng.gen_range(-1.0..1.0),
            2 | 3 => rng.gen_range(-1.5..1.5),
            _ => rng.gen_range(-0.5..1.5),
        });
        let errs = gradcheck(&[y, params], |g, v| {
            let b = g.factorized_bits(v[0], v[1]).unwrap();
            project(g, b, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn gaussian_bits() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let shape = [1, rng.gen_range(1..4), 2, 3];
        let y = Tensor::from_fn(&shape, |_| {
            f64::from(rng.gen_range(-3..=3)) + rng.gen_range(-0.4..0.4)
        });
        let sigma = Tensor::from_fn(&shape, |_| rng.gen_range(0.3..4.0));
        let errs = gradcheck(&[y, sigma], |g, v| {
            let b = g.gaussian_bits(v[0], v[1]).unwrap();
            project(g, b, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

fn rounding_regularizer() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut w = 0.0f64;
    for _ in 0..CASES {
        let beta = rng.gen_range(2.0..20.0);
        // |v| < 2 keeps the rectified sigmoid off its flat ends
        let v = random_tensor(&random_shape(&mut rng), &mut rng, -2.0, 2.0);
        let errs = gradcheck(&[v], |g, x| g.rounding_regularizer(x[0], beta));
        w = w.max(worst(&errs));
    }
    w
}

fn fake_quant_offsets() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let shape = [3, 2, 2, 2];
        let x = random_tensor(&shape, &mut rng, -1.0, 1.0);
        let axis = (case % 2 == 0).then_some(0);
        let stats = RangeStats::collect(&x, axis);
        let n: Vec<f64> = (0..stats.channels())
            .map(|_| rng.gen_range(0.9..1.2))
            .collect();
        let channels = ChannelQ::resolve(&n, &stats, 8).unwrap();
        let v = random_tensor(&shape, &mut rng, -2.0, 2.0);
        let errs = gradcheck(&[v], |g, vars| {
            let xv = g.constant(x.clone());
            let nv = g.constant(Tensor::new(vec![n.len()], n.clone()).unwrap());
            let y = g.fake_quant(
                xv,
                nv,
                Some(vars[0]),
                axis,
                channels.clone(),
                8,
                RoundingState::Soft,
            );
            project(g, y, case)
        });
        w = w.max(worst(&errs));
    }
    w
}

/// Mean R-D loss of `model` on `x`, with latent noise drawn from `noise_seed`.
fn codec_loss(
    g: &mut Graph,
    model: &LicModel,
    x: &Tensor,
    noise_seed: u64,
    trainable: bool,
) -> (Var, Vec<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut st = FloatStages::new(g, model, trainable, RoundMode::Noise, Some(&mut rng));
    let xv = g.constant(x.clone());
    let trace = forward(g, &mut st, xv).unwrap();
    let j = rd_per_sample(g, xv, trace.x_hat, trace.bits, model.lambda).unwrap();
    let vars = st.vars.all();
    (g.mean(j), vars)
}

/// The whole training loss, checked on sampled parameter coordinates of
/// factorized and hyperprior models.
fn full_codec_loss() -> f64 {
    const COORDS: usize = 12;
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut w = 0.0f64;
    for case in 0..CASES {
        let hyper = case % 2 == 1;
        let model = LicModel::new(
            Architecture::toy(hyper),
            [0.0018, 0.013, 0.0483][case as usize % 3],
            case,
        )
        .unwrap();
        let size = if hyper { 32 } else { 16 };
        let x = random_tensor(&[1, 1, size, size], &mut rng, 0.0, 1.0);
        let mut g = Graph::new();
        let (loss, vars) = codec_loss(&mut g, &model, &x, case, true);
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.params())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect();

        let eval = |m: &LicModel| {
            let mut g = Graph::new();
            let (l, _) = codec_loss(&mut g, m, &x, case, false);
            g.value(l).item().unwrap()
        };
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for _ in 0..COORDS {
            let t = rng.gen_range(0..analytic.len());
            let j = rng.gen_range(0..analytic[t].len());
            let mut m = model.clone();
            let orig = m.params()[t].data()[j];
            m.params_mut()[t].data_mut()[j] = orig + H;
            let up = eval(&m);
            m.params_mut()[t].data_mut()[j] = orig - H;
            let down = eval(&m);
            let numeric = (up - down) / (2.0 * H);
            err = err.max((numeric - analytic[t][j]).abs());
            scale = scale.max(numeric.abs());
        }
        w = w.max(err / scale.max(1e-12));
    }
    w
}
