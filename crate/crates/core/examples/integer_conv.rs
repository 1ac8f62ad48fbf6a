//! A quantized convolution run twice: once in float on dequantized operands
//! and once with int32 accumulation, a rescaled 8-bit bias and integer
//! requantization.
//!
//! cargo run --release --example integer_conv

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdoq::fixedpoint::{
    compute_zero_point, dequantize, qconv_integer, quantize, rescale_bias, AccumBias, FixedScale,
    QuantSpec,
};
use rdoq::geometry::ConvGeometry;
use rdoq::tensor::{conv_forward, Tensor};

fn affine(lo: f64, hi: f64, bits: u32) -> (FixedScale, i32) {
    let s = FixedScale::from_real((hi - lo) / f64::from((1 << bits) - 1));
    (s, compute_zero_point(lo, s, bits).expect("zero point"))
}

fn main() -> rdoq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (cin, cout, k) = (4, 6, 3);
    let x = Tensor::from_fn(&[1, cin, 8, 8], |_| rng.gen_range(0.0..2.0));
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-0.5..0.5));
    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let geom = ConvGeometry::forward(1, 1);

    let (sx, zx) = affine(0.0, 2.0, 8);
    let xq = quantize(x.data(), x.shape(), &QuantSpec::per_layer(sx, zx, 8))?;
    let (sw, zw): (Vec<_>, Vec<_>) = w
        .data()
        .chunks(cin * k * k)
        .map(|c| {
            affine(
                c.iter().cloned().fold(0.0, f64::min),
                c.iter().cloned().fold(0.0, f64::max),
                8,
            )
        })
        .unzip();
    let wq = quantize(
        w.data(),
        w.shape(),
        &QuantSpec::per_channel(0, sw.clone(), zw, 8),
    )?;

    // bias: 8 bits at its own scale, then moved to the accumulator scale
    let (sb, zb) = affine(
        b.iter().cloned().fold(0.0, f64::min),
        b.iter().cloned().fold(0.0, f64::max),
        8,
    );
    let bq = quantize(&b, &[cout], &QuantSpec::per_layer(sb, zb, 8))?;
    let acc_bias = rescale_bias(&bq.centered(), sb, &sw, sx)?;
    println!("bias (8-bit codes): {:?}", bq.values);
    println!("bias (accumulator): {acc_bias:?}");

    // float reference of the same quantized operands
    let xd = Tensor::new(xq.shape.clone(), dequantize(&xq))?;
    let wd = Tensor::new(wq.shape.clone(), dequantize(&wq))?;
    let bd = Tensor::new(vec![cout], dequantize(&bq))?;
    let y = conv_forward(&xd, &wd, Some(&bd), geom)?.map(|v| v.max(0.0));
    let top = y.data().iter().cloned().fold(0.0, f64::max);
    let (sy, zy) = affine(0.0, top, 8);

    let bias = AccumBias {
        values: acc_bias,
        group: 0,
    };
    let yq = qconv_integer(&xq, &wq, Some(&bias), geom, vec![sy], vec![zy], 8, true)?;
    let reference: Vec<i32> = y
        .data()
        .iter()
        .map(|&v| ((v / sy.value()).round() as i32 + zy).clamp(0, 255))
        .collect();
    let worst = yq
        .values
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .max()
        .unwrap_or(0);
    let exact = yq
        .values
        .iter()
        .zip(&reference)
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "output {:?}: {exact}/{} codes identical to the float path, max difference {worst} LSB",
        yq.shape,
        reference.len()
    );
    Ok(())
}
