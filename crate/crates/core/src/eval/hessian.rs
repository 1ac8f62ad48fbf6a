//! Second-order view of quantization: with a loss Hessian `H` over an
//! activation and a weight, the loss change of a perturbation `Δ` is `½ΔᵀHΔ`.
//! Off-diagonal curvature lets a larger perturbation cost less.

/// `[[1, 0.5], [0.5, 1]]`.
pub const TOY_HESSIAN: [[f64; 2]; 2] = [[1.0, 0.5], [0.5, 1.0]];

/// `ΔJ = ½ ΔᵀHΔ` for `Δ = [Δx, Δw]`.
pub fn delta_j(dx: f64, dw: f64, h: &[[f64; 2]; 2]) -> f64 {
    let d = [dx, dw];
    let mut acc = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            acc += d[i] * h[i][j] * d[j];
        }
    }
    0.5 * acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianCase {
    pub dx: f64,
    pub dw: f64,
    /// Euclidean size of the perturbation.
    pub error_norm: f64,
    pub delta_j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianReport {
    pub cases: Vec<HessianCase>,
    /// The larger perturbation has the smaller loss change.
    pub inverted: bool,
}

impl HessianReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            s.push_str(&format!(
                "[dx, dw] = [{}, {}]  |error| = {:.4}  dJ = {}\n",
                c.dx,
                c.dw,
                c.error_norm,
                fmt_short(c.delta_j)
            ));
        }
        s.push_str(if self.inverted {
            "larger quantization error, smaller loss change: yes\n"
        } else {
            "larger quantization error, smaller loss change: no\n"
        });
        s
    }
}

/// Shortest decimal that reads back within 1e-12.
fn fmt_short(v: f64) -> String {
    for p in 0..=15 {
        let s = format!("{v:.p$}");
        if (s.parse::<f64>().unwrap_or(f64::NAN) - v).abs() <= 1e-12 {
            return s;
        }
    }
    v.to_string()
}

/// Evaluates the two perturbations `[0.4, -0.4]` and `[0.3, 0.3]`.
pub fn hessian_toy_demo() -> HessianReport {
    let cases: Vec<HessianCase> = [(0.4, -0.4), (0.3, 0.3)]
        .iter()
        .map(|&(dx, dw)| HessianCase {
            dx,
            dw,
            error_norm: f64::hypot(dx, dw),
            delta_j: delta_j(dx, dw, &TOY_HESSIAN),
        })
        .collect();
    let inverted = cases[0].error_norm > cases[1].error_norm && cases[0].delta_j < cases[1].delta_j;
    HessianReport { cases, inverted }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form() {
        for (dx, dw) in [(0.4, -0.4), (0.3, 0.3), (1.0, 2.0), (-0.7, 0.1)] {
            let want = 0.5 * (dx * dx + dx * dw + dw * dw);
            assert!((delta_j(dx, dw, &TOY_HESSIAN) - want).abs() < 1e-15);
        }
        assert_eq!(delta_j(0.0, 0.0, &TOY_HESSIAN), 0.0);
    }

    #[test]
    fn demo_values() {
        let r = hessian_toy_demo();
        assert!((r.cases[0].delta_j - 0.08).abs() < 1e-12);
        assert!((r.cases[1].delta_j - 0.135).abs() < 1e-12);
        assert!(r.inverted);
        assert!(r.to_text().contains("dJ = 0.08\n"));
        assert!(r.to_text().contains("dJ = 0.135\n"));
    }
}
