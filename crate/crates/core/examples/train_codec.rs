//! Trains the toy codec on a synthetic corpus and reports its R-D point.
//!
//! cargo run --release --example train_codec -- [lambda] [steps] [lr]

use std::time::Instant;

use rdoq::licnet::dataset::{batch, synthetic_set};
use rdoq::licnet::{train_float, RoundMode, TrainConfig};

fn main() -> rdoq::Result<()> {
    let mut args = std::env::args().skip(1);
    let lambda: f64 = args.next().map_or(0.013, |s| s.parse().expect("lambda"));
    let steps: usize = args.next().map_or(500, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("lr"));

    let train = synthetic_set(32, 64, 1);
    let test = synthetic_set(8, 64, 2);
    let t0 = Instant::now();
    let cfg = TrainConfig {
        steps,
        lr,
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, report) = train_float(&train, lambda, &cfg)?;
    let secs = t0.elapsed().as_secs_f64();

    for (i, chunk) in report.curve.chunks((steps / 10).max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..  loss {mean:.4}", i * (steps / 10).max(1));
    }
    let x = batch(&test.iter().collect::<Vec<_>>())?;
    let (_, p) = model.forward_rd(&x, RoundMode::Hard, None)?;
    let psnr = 10.0 * (255.0f64 * 255.0 / p.distortion).log10();
    println!(
        "lambda {lambda}: bpp {:.4}  mse {:.2}  psnr {psnr:.2} dB  J {:.4}  ({secs:.1} s)",
        p.bpp, p.distortion, p.j
    );
    Ok(())
}
