//! Bjøntegaard delta rate between two rate-distortion curves.
//!
//! cargo run --release --example bd_rate

use rdoq::eval::metrics::{bd_rate, CurvePoint, RdCurve};

fn curve(label: &str, points: &[(f64, f64)]) -> RdCurve {
    RdCurve {
        label: label.into(),
        bit_width: 0,
        points: points
            .iter()
            .map(|&(bpp, psnr_db)| CurvePoint {
                lambda: 0.0,
                bpp,
                psnr_db,
                distortion: 0.0,
                j: bpp,
                estimated_bpp: bpp,
            })
            .collect(),
    }
}

fn main() -> rdoq::Result<()> {
    let anchor = curve(
        "anchor",
        &[(0.10, 28.0), (0.20, 31.0), (0.40, 34.0), (0.80, 37.0)],
    );
    let scaled = curve(
        "x1.1",
        &[(0.11, 28.0), (0.22, 31.0), (0.44, 34.0), (0.88, 37.0)],
    );
    let shifted = curve(
        "-0.3dB",
        &[(0.10, 27.7), (0.20, 30.7), (0.40, 33.7), (0.80, 36.7)],
    );
    let three = curve("3 points", &[(0.09, 28.5), (0.21, 31.5), (0.45, 34.5)]);
    for test in [&scaled, &shifted, &three] {
        println!("{:>9}: {:+.3}%", test.label, bd_rate(&anchor, test)?);
    }
    Ok(())
}
