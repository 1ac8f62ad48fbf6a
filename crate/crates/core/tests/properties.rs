use proptest::prelude::*;
use rdoq::entropycodec::{build_cdf, decode, encode};
use rdoq::eval::metrics::{bd_rate, psnr, CurvePoint, RdCurve};
use rdoq::fixedpoint::{
    compute_zero_point, dequantize, fix_scale, qmax, quantize_affine, FixedScale, DEFAULT_FRAC_BITS,
};
use rdoq::tensor::Tensor;

const CASES: u32 = 10_000;

fn bits() -> impl Strategy<Value = u32> {
    prop::sample::select(vec![2u32, 4, 6, 8, 10])
}

/// A quantizer for the range `[lo, hi]` (which contains zero).
fn quantizer(lo: f64, hi: f64, b: u32) -> (FixedScale, i32) {
    let s = FixedScale::from_real((hi - lo) / f64::from(qmax(b)));
    (s, compute_zero_point(lo, s, b).unwrap())
}

fn roundtrip(x: f64, s: FixedScale, z: i32, b: u32) -> (i32, f64) {
    let q = quantize_affine(&[x], s, z, b).unwrap();
    (q.values[0], dequantize(&q)[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn roundtrip_error_is_half_a_step(lo in -50.0f64..0.0, span in 0.05f64..100.0, t in 0.0f64..1.0, b in bits()) {
        let (s, z) = quantizer(lo, lo + span, b);
        let sv = s.value();
        let x = sv * (f64::from(-z) + t * f64::from(qmax(b)));
        let (_, back) = roundtrip(x, s, z, b);
        prop_assert!((back - x).abs() <= sv / 2.0 + 1e-12 * x.abs().max(1.0), "x {x} back {back} s {sv}");
    }

    #[test]
    fn out_of_range_values_saturate(lo in -50.0f64..0.0, span in 0.05f64..100.0, over in 1e-6f64..1e3, b in bits()) {
        let (s, z) = quantizer(lo, lo + span, b);
        let sv = s.value();
        let top = sv * f64::from(qmax(b) - z);
        let bottom = -sv * f64::from(z);
        let (q_hi, d_hi) = roundtrip(top + sv / 2.0 + over, s, z, b);
        let (q_lo, d_lo) = roundtrip(bottom - sv / 2.0 - over, s, z, b);
        prop_assert_eq!(q_hi, qmax(b));
        prop_assert_eq!(q_lo, 0);
        prop_assert_eq!(d_hi, top);
        prop_assert_eq!(d_lo, bottom);
    }

    #[test]
    fn fix_scale_is_idempotent(s in 0.0f64..1e4, frac in 0u32..40, extra in 1u32..24) {
        let total = (frac + extra).min(63);
        let once = fix_scale(s, frac, total);
        let twice = fix_scale(once.value(), frac, total);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn range_endpoints_and_zero_roundtrip(lo in -50.0f64..0.0, hi in 0.0f64..50.0, b in bits()) {
        prop_assume!(hi - lo > 0.05);
        let (s, z) = quantizer(lo, hi, b);
        let sv = s.value();
        // truncating the scale to fixed point can push `hi` past the last level
        let slack = sv / 2.0 + f64::from(qmax(b)) * 2f64.powi(-(DEFAULT_FRAC_BITS as i32)) + 1e-12;
        for e in [lo, hi] {
            let (_, back) = roundtrip(e, s, z, b);
            prop_assert!((back - e).abs() <= slack, "endpoint {e} came back as {back}");
        }
        prop_assert_eq!(roundtrip(0.0, s, z, b), (z, 0.0));
    }

    #[test]
    fn range_coder_is_lossless(
        scales in prop::collection::vec(0.2f64..20.0, 1..4),
        picks in prop::collection::vec((any::<prop::sample::Index>(), -40i32..40, 0u8..20), 0..64),
        outlier in -32768i32..32768,
    ) {
        let table = build_cdf(scales.len(), -12, 12, true, |r, v| {
            let b = scales[r];
            let cdf = |x: f64| if x < 0.0 { 0.5 * (x / b).exp() } else { 1.0 - 0.5 * (-x / b).exp() };
            cdf(f64::from(v) + 0.5) - cdf(f64::from(v) - 0.5)
        }).unwrap();
        let rows: Vec<usize> = picks.iter().map(|(i, _, _)| i.index(scales.len())).collect();
        // one symbol in twenty is a far outlier that must take the escape path
        let symbols: Vec<i32> = picks.iter().map(|&(_, v, k)| if k == 0 { outlier } else { v }).collect();
        let payload = encode(&symbols, &rows, &table).unwrap();
        prop_assert_eq!(decode(&payload, &rows, &table).unwrap(), symbols.clone());
        prop_assert_eq!(encode(&symbols, &rows, &table).unwrap(), payload);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), a in 1e-3f64..0.5, grow in 1.01f64..4.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let n = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let noisy = |k: f64| Tensor::new(vec![1, 1, 8, 8], x.data().iter().zip(n.data()).map(|(p, e)| p + k * e).collect()).unwrap();
        let (p1, p2) = (psnr(&x, &noisy(a)).unwrap(), psnr(&x, &noisy(a * grow)).unwrap());
        prop_assert!(p2 < p1, "{p1} then {p2}");
    }
}

fn curve(points: &[(f64, f64)]) -> RdCurve {
    RdCurve {
        label: "c".into(),
        bit_width: 0,
        points: points
            .iter()
            .map(|&(bpp, psnr_db)| CurvePoint {
                lambda: 0.0,
                bpp,
                psnr_db,
                distortion: 0.0,
                j: 0.0,
                estimated_bpp: bpp,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn bd_rate_is_antisymmetric(
        base in 0.05f64..0.5,
        slope in 0.05f64..0.4,
        q0 in 20.0f64..35.0,
        steps in prop::collection::vec(0.5f64..3.0, 3..=5),
        shift in -1.0f64..1.0,
        warp in -0.3f64..0.3,
    ) {
        let mut q = q0;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, dq) in steps.iter().enumerate() {
            a.push((base * (slope * (q - q0)).exp(), q));
            b.push((base * (slope * (q - q0) + 0.1 * warp * i as f64).exp(), q + shift));
            q += dq;
        }
        let (ab, ba) = (bd_rate(&curve(&a), &curve(&b)), bd_rate(&curve(&b), &curve(&a)));
        let (Ok(ab), Ok(ba)) = (ab, ba) else { return Ok(()) };
        let predicted = -ba / (1.0 + ba / 100.0);
        prop_assert!((ab - predicted).abs() <= 1e-6 * (1.0 + ab.abs()), "{ab} vs {predicted}");
    }
}
