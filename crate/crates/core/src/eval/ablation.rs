use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use super::codec::ImageCodec;
use super::curve::rd_curve;
use super::metrics::{bd_rate, RdCurve};
use crate::calib::{
    calibrate_model, minmax_baseline, mse_ptq, BiasMode, CalibConfig, Granularity, InitMethod,
    Objective, QuantizedModel, Rounding,
};
use crate::error::{Error, Result};
use crate::licnet::{Image, LicModel};

/// Calibration-set sizes swept by [`Ablation::CalibSize`].
pub const CALIB_SIZES: [usize; 5] = [1, 2, 5, 10, 20];
pub const BIT_WIDTHS: [u32; 3] = [6, 8, 10];
pub const CSV_HEADER: &str = "variant,lambda,bpp,psnr_db,j,wall_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Init,
    Granularity,
    Bias,
    CalibSize,
    BitWidth,
    /// Min-Max, MSE-PTQ and RDO-PTQ at the base bit-width.
    Methods,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Init,
        Ablation::Granularity,
        Ablation::Bias,
        Ablation::CalibSize,
        Ablation::BitWidth,
        Ablation::Methods,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Init => "init",
            Ablation::Granularity => "granularity",
            Ablation::Bias => "bias",
            Ablation::CalibSize => "calibsize",
            Ablation::BitWidth => "bitwidth",
            Ablation::Methods => "methods",
        }
    }

    /// Variant names with the configuration of each.
    pub fn variants(self, base: &CalibConfig) -> Vec<Variant> {
        let v = |name: String, method: Method, cfg: CalibConfig| Variant {
            name,
            method,
            cfg,
            calib_images: None,
        };
        match self {
            Ablation::Init => {
                let mut out = Vec::new();
                for (tag, init) in [
                    ("minmax", InitMethod::MinMax),
                    ("gridsearch", InitMethod::GridSearch),
                ] {
                    let noopt = CalibConfig {
                        init,
                        steps: 0,
                        rounding: Rounding::Nearest,
                        ..base.clone()
                    };
                    out.push(v(format!("{tag}-noopt"), Method::Rdo, noopt));
                    out.push(v(
                        format!("{tag}-opt"),
                        Method::Rdo,
                        CalibConfig {
                            init,
                            ..base.clone()
                        },
                    ));
                }
                out
            }
            Ablation::Granularity => vec![
                v(
                    "channel".into(),
                    Method::Rdo,
                    CalibConfig {
                        granularity: Granularity::ChannelWise,
                        ..base.clone()
                    },
                ),
                v(
                    "layer".into(),
                    Method::Rdo,
                    CalibConfig {
                        granularity: Granularity::LayerWise,
                        ..base.clone()
                    },
                ),
            ],
            Ablation::Bias => vec![
                v(
                    "rescaled".into(),
                    Method::Rdo,
                    CalibConfig {
                        bias: BiasMode::Rescaled,
                        ..base.clone()
                    },
                ),
                v(
                    "int32".into(),
                    Method::Rdo,
                    CalibConfig {
                        bias: BiasMode::Int32,
                        ..base.clone()
                    },
                ),
            ],
            Ablation::CalibSize => CALIB_SIZES
                .iter()
                .map(|&n| Variant {
                    calib_images: Some(n),
                    ..v(format!("calib{n}"), Method::Rdo, base.clone())
                })
                .collect(),
            Ablation::BitWidth => BIT_WIDTHS
                .iter()
                .map(|&b| {
                    v(
                        format!("rdo{b}"),
                        Method::Rdo,
                        CalibConfig {
                            bit_width: b,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            Ablation::Methods => {
                let b = base.bit_width;
                vec![
                    v(
                        format!("minmax{b}"),
                        Method::MinMax,
                        CalibConfig {
                            steps: 0,
                            rounding: Rounding::Nearest,
                            ..base.clone()
                        },
                    ),
                    v(
                        format!("mse{b}"),
                        Method::MsePtq,
                        CalibConfig {
                            rounding: Rounding::Nearest,
                            objective: Objective::TensorMse,
                            ..base.clone()
                        },
                    ),
                    v(format!("rdo{b}"), Method::Rdo, base.clone()),
                ]
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::param(format!("unknown ablation '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    MinMax,
    MsePtq,
    Rdo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub method: Method,
    pub cfg: CalibConfig,
    /// Leading calibration images to use; all when `None`.
    pub calib_images: Option<usize>,
}

impl Variant {
    /// Quantizes one float model; returns the model and the wall time.
    pub fn quantize(&self, model: &LicModel, calib: &[Image]) -> Result<(QuantizedModel, f64)> {
        let calib = match self.calib_images {
            Some(n) if n > calib.len() => {
                return Err(Error::param(format!(
                    "variant '{}' needs {n} calibration images, {} given",
                    self.name,
                    calib.len()
                )))
            }
            Some(n) => &calib[..n],
            None => calib,
        };
        let t = Instant::now();
        let q = match self.method {
            Method::MinMax => minmax_baseline(model, calib, &self.cfg)?,
            Method::MsePtq => mse_ptq(model, calib, &self.cfg)?.0,
            Method::Rdo => calibrate_model(model, calib, &self.cfg)?.0,
        };
        Ok((q, t.elapsed().as_secs_f64()))
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub j: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
    /// Float reference first, then one curve per variant.
    pub curves: Vec<RdCurve>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.4},{:.6},{:.3}\n",
                r.variant, r.lambda, r.bpp, r.psnr_db, r.j, r.wall_s
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn curve(&self, label: &str) -> Option<&RdCurve> {
        self.curves.iter().find(|c| c.label == label)
    }

    /// BD-rate of every variant against the float curve.
    pub fn bd_rates(&self) -> Vec<(String, Result<f64>)> {
        let float = &self.curves[0];
        self.curves[1..]
            .iter()
            .map(|c| (c.label.clone(), bd_rate(float, c)))
            .collect()
    }

    /// Summed test-set J of a variant over the λ ladder.
    pub fn total_j(&self, variant: &str) -> Option<f64> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == variant).collect();
        (!rows.is_empty()).then(|| rows.iter().map(|r| r.j).sum())
    }
}

fn rows_of(curve: &RdCurve, walls: &[f64]) -> Vec<AblationRow> {
    curve
        .points
        .iter()
        .zip(walls)
        .map(|(p, &wall_s)| AblationRow {
            variant: curve.label.clone(),
            lambda: p.lambda,
            bpp: p.bpp,
            psnr_db: p.psnr_db,
            j: p.j,
            wall_s,
        })
        .collect()
}

/// Runs every variant of `ablation` over the float models of a λ ladder and
/// evaluates each on `test` with the real entropy coder.
pub fn run_ablation(
    ablation: Ablation,
    models: &[LicModel],
    calib: &[Image],
    test: &[Image],
    base: &CalibConfig,
    workers: usize,
) -> Result<AblationTable> {
    if models.is_empty() {
        return Err(Error::param("ablation needs at least one float model"));
    }
    let floats: Vec<&dyn ImageCodec> = models.iter().map(|m| m as &dyn ImageCodec).collect();
    let float = rd_curve("float", &floats, test, workers)?;
    let mut rows = rows_of(&float, &vec![0.0; models.len()]);
    let mut curves = vec![float];
    for variant in ablation.variants(base) {
        let mut quantized = Vec::with_capacity(models.len());
        let mut walls = Vec::with_capacity(models.len());
        for m in models {
            let (q, wall) = variant.quantize(m, calib)?;
            quantized.push(q);
            walls.push(wall);
        }
        let codecs: Vec<&dyn ImageCodec> = quantized.iter().map(|q| q as &dyn ImageCodec).collect();
        let curve = rd_curve(&variant.name, &codecs, test, workers)?;
        rows.extend(rows_of(&curve, &walls));
        curves.push(curve);
    }
    Ok(AblationTable {
        name: ablation.name().to_string(),
        rows,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("colour".parse::<Ablation>().is_err());
    }

    #[test]
    fn variant_lists() {
        let base = CalibConfig::default();
        let names = |a: Ablation| {
            a.variants(&base)
                .into_iter()
                .map(|v| v.name)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            names(Ablation::Init),
            [
                "minmax-noopt",
                "minmax-opt",
                "gridsearch-noopt",
                "gridsearch-opt"
            ]
        );
        assert_eq!(
            names(Ablation::CalibSize),
            ["calib1", "calib2", "calib5", "calib10", "calib20"]
        );
        assert_eq!(names(Ablation::BitWidth), ["rdo6", "rdo8", "rdo10"]);
        assert_eq!(names(Ablation::Methods), ["minmax8", "mse8", "rdo8"]);
        let noopt = &Ablation::Init.variants(&base)[0].cfg;
        assert_eq!((noopt.steps, noopt.rounding), (0, Rounding::Nearest));
    }
}
