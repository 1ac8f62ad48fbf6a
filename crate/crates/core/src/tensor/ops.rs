use rand::Rng;

use super::graph::{BackwardOp, Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise op whose derivative depends only on its input and output.
struct Unary {
    deriv: fn(f64, f64) -> f64,
}

impl BackwardOp for Unary {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad)
            .map(|((&x, &y), &g)| g * (self.deriv)(x, y))
            .collect();
        vec![Some(g)]
    }
}

struct Clamp {
    lo: f64,
    hi: f64,
}

impl BackwardOp for Clamp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x >= self.lo && x <= self.hi { g } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary(BinaryKind);

impl BackwardOp for Binary {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        match self.0 {
            BinaryKind::Add => vec![Some(grad.to_vec()), Some(grad.to_vec())],
            BinaryKind::Sub => vec![Some(grad.to_vec()), Some(grad.iter().map(|g| -g).collect())],
            BinaryKind::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    Some(grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                    Some(grad.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            }
        }
    }
}

struct Affine {
    scale: f64,
}

impl BackwardOp for Affine {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.scale).collect())]
    }
}

/// Per-sample sum over all trailing axes.
struct RowSum {
    inner: usize,
}

impl BackwardOp for RowSum {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            grad.iter()
                .flat_map(|&g| std::iter::repeat_n(g, self.inner))
                .collect(),
        )]
    }
}

struct Reduce {
    scale: f64,
}

impl BackwardOp for Reduce {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].len()])]
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, deriv: fn(f64, f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.custom(&[x], value, Box::new(Unary { deriv }))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.custom(&[a, b], value, Box::new(Binary(kind))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.custom(&[x], value, Box::new(Affine { scale: c }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.custom(&[x], value, Box::new(Affine { scale: 1.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.custom(&[x], value, Box::new(Clamp { lo, hi }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.custom(&[x], Tensor::scalar(s), Box::new(Reduce { scale: 1.0 }))
    }

    /// Sums every sample of a batch: `[B, ...] -> [B]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &b = t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("sum_rows of a 0-d tensor"))?;
        let inner = t.len().checked_div(b).unwrap_or(0);
        let data = if inner == 0 {
            vec![0.0; b]
        } else {
            t.data().chunks(inner).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::new(vec![b], data)?;
        Ok(self.custom(&[x], value, Box::new(RowSum { inner })))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.custom(&[x], Tensor::scalar(s), Box::new(Reduce { scale: 1.0 / n }))
    }

    /// Rounds half away from zero; the gradient passes straight through.
    pub fn ste_round(&mut self, x: Var) -> Var {
        self.unary(x, f64::round, |_, _| 1.0)
    }

    /// Adds i.i.d. `Uniform[-0.5, 0.5)` noise; identity gradient.
    pub fn noise_round<R: Rng + ?Sized>(&mut self, x: Var, rng: &mut R) -> Var {
        let value = {
            let t = self.value(x);
            let data = t
                .data()
                .iter()
                .map(|&v| v + (rng.gen::<f64>() - 0.5))
                .collect();
            Tensor {
                shape: t.shape().to_vec(),
                data,
            }
        };
        self.custom(&[x], value, Box::new(Affine { scale: 1.0 }))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn ste_round_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.4, -0.5, 3.0]).unwrap());
        let r = g.ste_round(x);
        assert_eq!(g.value(r).data(), &[1.0, -1.0, 3.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn noise_round_bounds_and_determinism() {
        let x = Tensor::from_fn(&[1000], |i| i as f64 * 0.37);
        let run = |seed| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = g.noise_round(v, &mut rng);
            g.value(n).clone()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
        for (o, i) in a.data().iter().zip(x.data()) {
            let d = o - i;
            assert!((-0.5..0.5).contains(&d));
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[4], 2.0));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.square(x);
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[4.0]);
    }
}
