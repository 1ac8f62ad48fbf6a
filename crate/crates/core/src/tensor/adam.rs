use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_tensors<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self::new(params.into_iter().map(Tensor::len))
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    adam_step_per_tensor(params, grads, state, &vec![lr; params.len()])
}

/// [`adam_step`] with one learning rate per parameter tensor.
pub fn adam_step_per_tensor(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lrs: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != lrs.len() {
        return Err(Error::shape(
            "adam: parameter, gradient and state counts differ",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape(format!("adam: parameter {i} size mismatch")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lrs[i] * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[3], 0.7);
        let mut st = AdamState::new([3]);
        adam_step(&mut [&mut p], &[&[0.0; 3]], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[0.7; 3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+eps).
        let g = 0.37;
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut p], &[&[g]], &mut st, 1e-3).unwrap();
        let expected = 1e-3 * g / (g + ADAM_EPS);
        assert!((p.data()[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x - 2.5)², minimizer 2.5.
        let mut p = Tensor::scalar(-1.0);
        let mut st = AdamState::new([1]);
        for _ in 0..500 {
            let g = 2.0 * (p.data()[0] - 2.5);
            adam_step(&mut [&mut p], &[&[g]], &mut st, 0.05).unwrap();
        }
        assert!((p.data()[0] - 2.5).abs() < 1e-3, "{}", p.data()[0]);
    }
}
