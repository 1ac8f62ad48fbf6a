#![allow(dead_code)]

pub mod gradcases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdoq::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

/// Central finite-difference oracle. Returns, per input, the max-norm relative
/// error `max|analytic - numeric| / max|numeric|` of the gradient of the
/// scalar produced by `build`.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item().unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let mut errors = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.len());
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((numeric - analytic[j]).abs());
            scale = scale.max(numeric.abs());
        }
        errors.push(if scale > 0.0 { worst / scale } else { worst });
    }
    errors
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
