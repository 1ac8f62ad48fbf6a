//! Reverse-mode gradients of a small convolutional loss checked against
//! central finite differences.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdoq::geometry::ConvGeometry;
use rdoq::tensor::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor, target: &Tensor) -> rdoq::Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let tv = g.constant(target.clone());
    let y = g.conv2d(xv, wv, None, ConvGeometry::forward(2, 1))?;
    let y = g.softplus(y);
    let l = g.mse(y, tv)?;
    let grads = g.backward(l)?;
    let dw = Tensor::new(w.shape().to_vec(), grads.get_or_zeros(wv, w.len()))?;
    Ok((g.value(l).item()?, dw))
}

fn main() -> rdoq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.gen_range(-0.5..0.5));
    let target = Tensor::from_fn(&[2, 4, 4, 4], |_| rng.gen_range(0.0..1.0));
    let (l, dw) = loss(&x, &w, &target)?;
    println!("loss {l:.6}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in (0..w.len()).step_by(7) {
        let bump = |d: f64| {
            let mut data = w.data().to_vec();
            data[i] += d;
            Tensor::new(w.shape().to_vec(), data)
        };
        let fd = (loss(&x, &bump(h)?, &target)?.0 - loss(&x, &bump(-h)?, &target)?.0) / (2.0 * h);
        let an = dw.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("w[{i:>3}]  analytic {an:+.8}  numeric {fd:+.8}  rel {rel:.1e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
