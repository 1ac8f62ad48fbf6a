//! Second-order loss change of two toy perturbations: the one with the larger
//! quantization error can cost less.
//!
//! cargo run --release --example hessian_demo

use rdoq::eval::hessian::{delta_j, TOY_HESSIAN};
use rdoq::eval::hessian_toy_demo;

fn main() {
    let report = hessian_toy_demo();
    print!("{}", report.to_text());

    // a small sweep around the circle of radius 0.5
    println!("\nangle  dx      dw      dJ");
    for k in 0..8 {
        let a = k as f64 * std::f64::consts::PI / 8.0;
        let (dx, dw) = (0.5 * a.cos(), 0.5 * a.sin());
        println!(
            "{:>5.1}  {dx:+.3}  {dw:+.3}  {:.4}",
            a.to_degrees(),
            delta_j(dx, dw, &TOY_HESSIAN)
        );
    }
}
