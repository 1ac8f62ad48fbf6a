use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR in dB from an MSE on the 0-255 scale.
pub fn psnr_from_mse(mse_255: f64) -> f64 {
    if mse_255 <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse_255).log10()).min(PSNR_CAP_DB)
}

/// MSE on the 0-255 scale of two images given on the 0-1 scale.
pub fn mse_255(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("images differ in shape"));
    }
    let sse: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / x.len().max(1) as f64 * 255.0 * 255.0)
}

pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse_255(x, x_hat)?))
}

/// One operating point of a curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub lambda: f64,
    pub bpp: f64,
    /// Mean of per-image PSNR values.
    pub psnr_db: f64,
    /// Mean MSE on the 0-255 scale.
    pub distortion: f64,
    pub j: f64,
    /// Model rate estimate, for comparison with `bpp`.
    pub estimated_bpp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    /// 0 for the float model.
    pub bit_width: u32,
    pub points: Vec<CurvePoint>,
}

impl RdCurve {
    /// Points ordered by rate.
    pub fn sorted(&self) -> Vec<CurvePoint> {
        let mut p = self.points.clone();
        p.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        p
    }
}

/// Least-squares polynomial coefficients (lowest order first).
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = degree + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for (&xi, &yi) in x.iter().zip(y) {
        let pw: Vec<f64> = (0..2 * n).map(|k| xi.powi(k as i32)).collect();
        for r in 0..n {
            for c in 0..n {
                a[r][c] += pw[r + c];
            }
            a[r][n] += yi * pw[r];
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return Err(Error::Numeric(
                "singular fit (repeated quality values)".into(),
            ));
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok((0..n).map(|r| a[r][n] / a[r][r]).collect())
}

/// Log-rate as a function of PSNR.
enum LogRate {
    /// Classic least-squares cubic, on a PSNR axis shifted by `centre`.
    Cubic { coef: Vec<f64>, centre: f64 },
    /// Piecewise cubic Hermite through the points (sorted by PSNR).
    Hermite {
        q: Vec<f64>,
        r: Vec<f64>,
        d: Vec<f64>,
    },
}

impl LogRate {
    fn fit(q: &[f64], r: &[f64], centre: f64) -> Result<Self> {
        if q.len() >= 4 {
            let shifted: Vec<f64> = q.iter().map(|v| v - centre).collect();
            return Ok(LogRate::Cubic {
                coef: polyfit(&shifted, r, 3)?,
                centre,
            });
        }
        let mut idx: Vec<usize> = (0..q.len()).collect();
        idx.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
        let q: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
        let r: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
        if q.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Numeric("repeated quality values".into()));
        }
        let d = pchip_slopes(&q, &r);
        Ok(LogRate::Hermite { q, r, d })
    }

    fn at(&self, x: f64) -> f64 {
        match self {
            LogRate::Cubic { coef, centre } => {
                coef.iter().rev().fold(0.0, |acc, c| acc * (x - centre) + c)
            }
            LogRate::Hermite { q, r, d } => {
                let k = q.windows(2).position(|w| x <= w[1]).unwrap_or(q.len() - 2);
                let h = q[k + 1] - q[k];
                let t = (x - q[k]) / h;
                let (t2, t3) = (t * t, t * t * t);
                (2.0 * t3 - 3.0 * t2 + 1.0) * r[k]
                    + (t3 - 2.0 * t2 + t) * h * d[k]
                    + (-2.0 * t3 + 3.0 * t2) * r[k + 1]
                    + (t3 - t2) * h * d[k + 1]
            }
        }
    }

    /// Exact integral over `[lo, hi]`: Simpson's rule on each cubic piece.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut cuts = vec![lo];
        if let LogRate::Hermite { q, .. } = self {
            cuts.extend(q.iter().copied().filter(|&k| k > lo && k < hi));
        }
        cuts.push(hi);
        cuts.windows(2)
            .map(|w| {
                (w[1] - w[0]) / 6.0
                    * (self.at(w[0]) + 4.0 * self.at(0.5 * (w[0] + w[1])) + self.at(w[1]))
            })
            .sum()
    }
}

/// Shape-preserving slopes (Fritsch-Carlson).
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent: log-rate as
/// a function of PSNR, averaged over the common PSNR interval. Curves of four
/// or more points use the classic cubic fit; a cubic is underdetermined by
/// three, so those are interpolated piecewise (monotone cubic Hermite).
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let prep = |c: &RdCurve| -> Result<(Vec<f64>, Vec<f64>)> {
        if c.points.len() < 3 {
            return Err(Error::param(format!(
                "curve '{}' has {} points, BD-rate needs 3",
                c.label,
                c.points.len()
            )));
        }
        if c.points
            .iter()
            .any(|p| !(p.bpp > 0.0 && p.psnr_db.is_finite()))
        {
            return Err(Error::param(format!(
                "curve '{}' has a non-positive rate",
                c.label
            )));
        }
        Ok((
            c.points.iter().map(|p| p.psnr_db).collect(),
            c.points.iter().map(|p| p.bpp.ln()).collect(),
        ))
    };
    let (qa, ra) = prep(anchor)?;
    let (qt, rt) = prep(test)?;
    let min = |q: &[f64]| q.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |q: &[f64]| q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min(&qa).max(min(&qt)), max(&qa).min(max(&qt)));
    if hi <= lo {
        return Err(Error::param("curves do not overlap in quality"));
    }
    // Centre the PSNR axis for a well-conditioned fit.
    let centre = 0.5 * (lo + hi);
    let fa = LogRate::fit(&qa, &ra, centre)?;
    let ft = LogRate::fit(&qt, &rt, centre)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
        RdCurve {
            label: label.into(),
            bit_width: 0,
            points: pts
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

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(65.025) - 30.0).abs() < 1e-12);
        assert!((psnr_from_mse(650.25) - 20.0).abs() < 1e-12);
        let x = Tensor::full(&[1, 1, 2, 2], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn bd_rate_of_scaled_rates() {
        let a = curve("a", &[(0.1, 25.0), (0.2, 28.0), (0.4, 31.0), (0.8, 33.5)]);
        let b = curve(
            "b",
            &[(0.11, 25.0), (0.22, 28.0), (0.44, 31.0), (0.88, 33.5)],
        );
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        assert!((bd_rate(&a, &b).unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn three_point_curves_follow_the_points() {
        // A sharp knee: a quadratic through these dips far below the data.
        let a = curve("a", &[(0.0811, 29.945), (0.1631, 33.692), (0.2698, 34.413)]);
        let b = curve("b", &[(0.0815, 29.792), (0.1626, 33.039), (0.2722, 33.394)]);
        let d = bd_rate(&a, &b).unwrap();
        assert!(d > 0.0 && d < 50.0, "{d}");
        let scaled = curve(
            "s",
            &[
                (0.0811 * 1.1, 29.945),
                (0.1631 * 1.1, 33.692),
                (0.2698 * 1.1, 34.413),
            ],
        );
        assert!((bd_rate(&a, &scaled).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn hermite_slopes_preserve_monotonicity() {
        let x = [0.0, 1.0, 1.2, 4.0];
        let y = [0.0, 0.1, 2.0, 2.1];
        let f = LogRate::Hermite {
            q: x.to_vec(),
            r: y.to_vec(),
            d: pchip_slopes(&x, &y),
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let v = f.at(i as f64 * 0.01);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        assert!((f.at(1.2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bd_rate_rejects_short_or_disjoint_curves() {
        let a = curve("a", &[(0.1, 25.0), (0.2, 28.0), (0.4, 31.0)]);
        assert!(bd_rate(&a, &curve("s", &[(0.1, 25.0)])).is_err());
        assert!(bd_rate(&a, &curve("d", &[(0.1, 35.0), (0.2, 36.0), (0.3, 37.0)])).is_err());
    }
}
