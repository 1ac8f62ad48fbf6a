//! The `rdoq` command line: argument parsing, configuration layering, run
//! manifests and exit codes. The binary only forwards to [`run`].

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::{load_images, RunConfig, SEED_ENV};

use crate::calib::{calibrate_model, minmax_baseline, mse_ptq, CalibReport, QuantizedModel};
use crate::entropycodec::Bitstream;
use crate::error::{Error, Result};
use crate::eval::ablation::{run_ablation, Ablation};
use crate::eval::codec::{ImageCodec, ImageCoder};
use crate::eval::curve::{code_images, summarize};
use crate::eval::hessian::hessian_toy_demo;
use crate::eval::metrics::{bd_rate, RdCurve};
use crate::licnet::format::hex;
use crate::licnet::{train_float, Container, Image, LicModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit status of a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::Shape(_) => EXIT_USAGE,
        Error::Io(_) | Error::Format(_) | Error::CorruptStream(_) => EXIT_IO,
        Error::Numeric(_) | Error::Overflow(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rdoq",
    version,
    about = "Rate-distortion optimized post-training quantization of a toy learned image codec"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Flat key=value configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Where manifests of runs without an output file go.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct QuantFlags {
    #[arg(long)]
    pub bits: Option<u32>,
    /// Adam steps per layer.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// channel | layer
    #[arg(long)]
    pub granularity: Option<String>,
    /// minmax | gridsearch
    #[arg(long)]
    pub init: Option<String>,
    /// adaptive | nearest
    #[arg(long)]
    pub rounding: Option<String>,
    /// rescaled | int32
    #[arg(long)]
    pub bias: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float codec for one lambda.
    Train {
        #[command(flatten)]
        common: Common,
        /// PGM directory or synthetic:COUNT:SEED
        #[arg(long)]
        images: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a float model against a calibration set.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantFlags,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<String>,
        /// rdo | mse | minmax
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy-code a test set with a ladder of models and report the R-D curve.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model containers, one per lambda.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        images: Option<String>,
        /// Anchor models for a BD-rate figure.
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long)]
        label: Option<String>,
        /// CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compress one PGM image.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        lambda_index: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a PGM image from a stream.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation over a lambda ladder.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantFlags,
        /// init | granularity | bias | calibsize | bitwidth | methods
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        calib: Option<String>,
        #[arg(long)]
        images: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the two-perturbation loss example.
    DemoHessian {
        #[command(flatten)]
        common: Common,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn apply_quant(cfg: &mut RunConfig, q: QuantFlags) {
    cfg.set_opt("bits", q.bits);
    cfg.set_opt("steps", q.steps);
    cfg.set_opt("lr", q.lr);
    cfg.set_opt("granularity", q.granularity);
    cfg.set_opt("init", q.init);
    cfg.set_opt("rounding", q.rounding);
    cfg.set_opt("bias", q.bias);
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Calibrate { .. } => "calibrate",
            Command::Eval { .. } => "eval",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Ablate { .. } => "ablate",
            Command::DemoHessian { .. } => "demo-hessian",
        }
    }

    /// Layers the configuration file, `RDOQ_SEED` and the flags.
    pub fn into_config(self) -> Result<RunConfig> {
        let common = match &self {
            Command::Train { common, .. }
            | Command::Calibrate { common, .. }
            | Command::Eval { common, .. }
            | Command::Encode { common, .. }
            | Command::Decode { common, .. }
            | Command::Ablate { common, .. }
            | Command::DemoHessian { common } => common,
        };
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        cfg.set_opt("seed", common.seed);
        cfg.set_opt("workers", common.workers);
        cfg.set_opt("report_dir", path_str(common.report_dir.clone()));
        match self {
            Command::Train {
                images,
                lambda,
                steps,
                lr,
                out,
                ..
            } => {
                cfg.set_opt("images", images);
                cfg.set_opt("lambda", lambda);
                cfg.set_opt("steps", steps);
                cfg.set_opt("lr", lr);
                cfg.set_opt("out", path_str(out));
            }
            Command::Calibrate {
                quant,
                model,
                calib,
                method,
                out,
                ..
            } => {
                apply_quant(&mut cfg, quant);
                cfg.set_opt("model", path_str(model));
                cfg.set_opt("calib", calib);
                cfg.set_opt("method", method);
                cfg.set_opt("out", path_str(out));
            }
            Command::Eval {
                models,
                images,
                anchor,
                label,
                out,
                ..
            } => {
                cfg.set_opt("models", models);
                cfg.set_opt("images", images);
                cfg.set_opt("anchor", anchor);
                cfg.set_opt("label", label);
                cfg.set_opt("out", path_str(out));
            }
            Command::Encode {
                model,
                image,
                lambda_index,
                out,
                ..
            } => {
                cfg.set_opt("model", path_str(model));
                cfg.set_opt("image", path_str(image));
                cfg.set_opt("lambda_index", lambda_index);
                cfg.set_opt("out", path_str(out));
            }
            Command::Decode {
                model, input, out, ..
            } => {
                cfg.set_opt("model", path_str(model));
                cfg.set_opt("input", path_str(input));
                cfg.set_opt("out", path_str(out));
            }
            Command::Ablate {
                quant,
                name,
                models,
                calib,
                images,
                out_dir,
                ..
            } => {
                apply_quant(&mut cfg, quant);
                cfg.set_opt("name", name);
                cfg.set_opt("models", models);
                cfg.set_opt("calib", calib);
                cfg.set_opt("images", images);
                cfg.set_opt("out_dir", path_str(out_dir));
            }
            Command::DemoHessian { .. } => {}
        }
        Ok(cfg)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Record of one run, written as `key=value` lines that also load as a
/// configuration (bookkeeping keys carry the `manifest.` prefix).
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn render(&self, cfg: &RunConfig) -> Result<String> {
        let mut s = String::new();
        s.push_str(&format!("manifest.command={}\n", self.command));
        s.push_str(&format!("manifest.config_digest={}\n", cfg.digest()));
        s.push_str(&format!("manifest.seed={}\n", cfg.seed()?));
        s.push_str(&format!(
            "manifest.version={} {}\n",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        ));
        s.push_str(&format!(
            "manifest.container_version={}\n",
            crate::licnet::format::VERSION
        ));
        for (tag, files) in [("input", &self.inputs), ("output", &self.outputs)] {
            for f in files.iter().filter(|f| f.is_file()) {
                s.push_str(&format!(
                    "manifest.{tag}.{}={}\n",
                    f.display(),
                    sha256_file(f)?
                ));
            }
        }
        s.push_str(&cfg.to_text());
        Ok(s)
    }

    pub fn write(&self, cfg: &RunConfig, path: &Path) -> Result<()> {
        fs::write(path, self.render(cfg)?)?;
        Ok(())
    }
}

fn need_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

fn need_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("directory {} does not exist", p.display()),
        ))),
        _ => Ok(()),
    }
}

/// Image sources are either directories or `synthetic:` specs.
fn need_source(src: &str) -> Result<()> {
    if src.starts_with("synthetic:") || Path::new(src).is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("image directory {src} not found"),
        )))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A model container holding either a float or a quantized codec.
pub enum LoadedModel {
    Float(LicModel),
    Quantized(QuantizedModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::from_bytes(&fs::read(path)?)?;
        Ok(match c.quant {
            Some(_) => LoadedModel::Quantized(QuantizedModel::from_container(&c)?),
            None => LoadedModel::Float(c.model),
        })
    }

    pub fn codec(&self) -> &dyn ImageCodec {
        match self {
            LoadedModel::Float(m) => m,
            LoadedModel::Quantized(q) => q,
        }
    }
}

fn run_meta(cfg: &RunConfig, command: &str) -> Result<Vec<(String, String)>> {
    Ok(vec![
        ("command".into(), command.into()),
        ("config_digest".into(), cfg.digest()),
        ("seed".into(), cfg.seed()?.to_string()),
    ])
}

fn curve_of(
    label: &str,
    paths: &[String],
    images: &[Image],
    workers: usize,
) -> Result<(RdCurve, Vec<LoadedModel>)> {
    let models = paths
        .iter()
        .map(|p| LoadedModel::load(Path::new(p)))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    let first = &images[0];
    for m in &models {
        let coder = ImageCoder::new(m.codec())?;
        let results = code_images(&coder, images, workers)?;
        points.push(summarize(
            &results,
            first.width * first.height,
            m.codec().lambda(),
        ));
    }
    let bit_width = models.first().map_or(0, |m| m.codec().bit_width());
    Ok((
        RdCurve {
            label: label.to_string(),
            bit_width,
            points,
        },
        models,
    ))
}

/// Executes a parsed command; returns the text printed on success.
pub fn execute(command: Command) -> Result<String> {
    let name = command.name();
    let cfg = command.into_config()?;
    let workers = cfg.workers()?;
    let mut manifest = Manifest {
        command: name.to_string(),
        ..Manifest::default()
    };
    let report_dir = cfg
        .get("report_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = String::new();

    let manifest_path = match name {
        "train" => {
            let src = cfg.require("images")?;
            let lambda: f64 = cfg
                .parsed("lambda")?
                .ok_or_else(|| Error::param("missing setting 'lambda'"))?;
            let dest = cfg.path("out")?;
            need_source(src)?;
            need_parent(&dest)?;
            let images = load_images(src)?;
            let (model, report) = train_float(&images, lambda, &cfg.train_config()?)?;
            let container = Container {
                model,
                quant: None,
                meta: run_meta(&cfg, name)?,
            };
            fs::write(&dest, container.to_bytes())?;
            let curve_path = with_suffix(&dest, ".curve.tsv");
            let curve: String = report
                .curve
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i}\t{l}\n"))
                .collect();
            fs::write(&curve_path, format!("step\tloss\n{curve}"))?;
            out.push_str(&format!(
                "trained lambda {lambda}: loss {:.5} -> {:.5}\n",
                report.curve.first().copied().unwrap_or(f64::NAN),
                report.curve.last().copied().unwrap_or(f64::NAN)
            ));
            manifest.outputs = vec![dest.clone(), curve_path];
            with_suffix(&dest, ".manifest")
        }
        "calibrate" => {
            let src = cfg.path("model")?;
            let calib_src = cfg.require("calib")?;
            let dest = cfg.path("out")?;
            need_file(&src)?;
            need_source(calib_src)?;
            need_parent(&dest)?;
            let qcfg = cfg.calib_config()?;
            let model = match LoadedModel::load(&src)? {
                LoadedModel::Float(m) => m,
                LoadedModel::Quantized(_) => {
                    return Err(Error::param("calibration needs a float model"))
                }
            };
            let calib = load_images(calib_src)?;
            let (q, report) = match cfg.get("method").unwrap_or("rdo") {
                "rdo" => calibrate_model(&model, &calib, &qcfg)?,
                "mse" => mse_ptq(&model, &calib, &qcfg)?,
                "minmax" => (
                    minmax_baseline(&model, &calib, &qcfg)?,
                    CalibReport::default(),
                ),
                m => {
                    return Err(Error::param(format!(
                        "method must be rdo, mse or minmax, got '{m}'"
                    )))
                }
            };
            fs::write(&dest, q.to_container(run_meta(&cfg, name)?).to_bytes())?;
            let report_path = with_suffix(&dest, ".report.tsv");
            fs::write(
                &report_path,
                format!("# config_digest={}\n{}", cfg.digest(), report.to_text()),
            )?;
            out.push_str(&report.to_text());
            manifest.inputs = vec![src];
            manifest.outputs = vec![dest.clone(), report_path];
            with_suffix(&dest, ".manifest")
        }
        "eval" => {
            let paths = cfg.list("models")?;
            let src = cfg.require("images")?;
            let dest = cfg.path("out")?;
            paths.iter().try_for_each(|p| need_file(Path::new(p)))?;
            need_source(src)?;
            need_parent(&dest)?;
            let images = load_images(src)?;
            let label = cfg.get("label").unwrap_or("model");
            let (curve, _) = curve_of(label, &paths, &images, workers)?;
            let mut csv = String::from("variant,lambda,bpp,psnr_db,j,wall_s\n");
            for p in &curve.points {
                csv.push_str(&format!(
                    "{label},{},{:.6},{:.4},{:.6},0\n",
                    p.lambda, p.bpp, p.psnr_db, p.j
                ));
                out.push_str(&format!(
                    "lambda {}: {:.4} bpp (estimate {:.4}), {:.2} dB, J {:.5}\n",
                    p.lambda, p.bpp, p.estimated_bpp, p.psnr_db, p.j
                ));
            }
            fs::write(&dest, csv)?;
            if cfg.get("anchor").is_some() {
                let anchors = cfg.list("anchor")?;
                let (anchor, _) = curve_of("anchor", &anchors, &images, workers)?;
                out.push_str(&format!(
                    "BD-rate vs anchor: {:.3}%\n",
                    bd_rate(&anchor, &curve)?
                ));
                manifest.inputs.extend(anchors.iter().map(PathBuf::from));
            }
            manifest.inputs.extend(paths.iter().map(PathBuf::from));
            manifest.outputs = vec![dest.clone()];
            with_suffix(&dest, ".manifest")
        }
        "encode" => {
            let src = cfg.path("model")?;
            let image_path = cfg.path("image")?;
            let dest = cfg.path("out")?;
            need_file(&src)?;
            need_file(&image_path)?;
            need_parent(&dest)?;
            let model = LoadedModel::load(&src)?;
            let image = Image::read_pgm(&image_path)?;
            let coder = ImageCoder::new(model.codec())?;
            let stream = coder.compress(&image, cfg.parsed_or("lambda_index", 0u8)?)?;
            fs::write(&dest, stream.to_bytes())?;
            out.push_str(&format!(
                "{} payload bits, {:.4} bpp\n",
                stream.payload_bits(),
                stream.bpp()
            ));
            manifest.inputs = vec![src, image_path];
            manifest.outputs = vec![dest.clone()];
            with_suffix(&dest, ".manifest")
        }
        "decode" => {
            let src = cfg.path("model")?;
            let input = cfg.path("input")?;
            let dest = cfg.path("out")?;
            need_file(&src)?;
            need_file(&input)?;
            need_parent(&dest)?;
            let model = LoadedModel::load(&src)?;
            let stream = Bitstream::from_bytes(&fs::read(&input)?)?;
            let image = ImageCoder::new(model.codec())?.decompress(&stream)?;
            image.write_pgm(&dest)?;
            out.push_str(&format!("decoded {}x{}\n", image.width, image.height));
            manifest.inputs = vec![src, input];
            manifest.outputs = vec![dest.clone()];
            with_suffix(&dest, ".manifest")
        }
        "ablate" => {
            let ablation: Ablation = cfg.require("name")?.parse()?;
            let paths = cfg.list("models")?;
            let (calib_src, test_src) = (cfg.require("calib")?, cfg.require("images")?);
            let dir = cfg.path("out_dir")?;
            paths.iter().try_for_each(|p| need_file(Path::new(p)))?;
            need_source(calib_src)?;
            need_source(test_src)?;
            if !dir.is_dir() {
                need_parent(&dir)?;
                fs::create_dir_all(&dir)?;
            }
            let base = cfg.calib_config()?;
            let models = paths
                .iter()
                .map(|p| match LoadedModel::load(Path::new(p))? {
                    LoadedModel::Float(m) => Ok(m),
                    LoadedModel::Quantized(_) => {
                        Err(Error::param(format!("{p} is already quantized")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let table = run_ablation(
                ablation,
                &models,
                &load_images(calib_src)?,
                &load_images(test_src)?,
                &base,
                workers,
            )?;
            let csv = dir.join(format!("{}.csv", ablation.name()));
            table.write_csv(&csv)?;
            let mut summary = String::new();
            for (label, bd) in table.bd_rates() {
                match bd {
                    Ok(v) => summary.push_str(&format!(
                        "{label}\tbd_rate_vs_float={v:.4}%\ttotal_j={:.6}\n",
                        table.total_j(&label).unwrap_or(f64::NAN)
                    )),
                    Err(e) => summary.push_str(&format!("{label}\tbd_rate_vs_float=n/a ({e})\n")),
                }
            }
            let summary_path = dir.join(format!("{}.summary.txt", ablation.name()));
            fs::write(&summary_path, &summary)?;
            out.push_str(&table.to_csv());
            out.push_str(&summary);
            manifest.inputs = paths.iter().map(PathBuf::from).collect();
            manifest.outputs = vec![csv, summary_path];
            dir.join(format!("{}.manifest", ablation.name()))
        }
        _ => {
            out.push_str(&hessian_toy_demo().to_text());
            if !report_dir.is_dir() {
                fs::create_dir_all(&report_dir)?;
            }
            report_dir.join("demo-hessian.manifest")
        }
    };
    manifest.write(&cfg, &manifest_path)?;
    Ok(out)
}

/// Parses `args` (program name first), runs, prints and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("rdoq: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::param("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(run(["rdoq", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["rdoq", "train", "--bogus", "1"]), EXIT_USAGE);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "bits=6\nsteps=5\n").unwrap();
        let cli = Cli::try_parse_from([
            "rdoq",
            "calibrate",
            "--config",
            file.to_str().unwrap(),
            "--bits",
            "10",
        ])
        .unwrap();
        let cfg = cli.command.into_config().unwrap();
        let q = cfg.calib_config().unwrap();
        assert_eq!((q.bit_width, q.steps), (10, 5));
    }

    #[test]
    fn missing_input_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("q.rdoq");
        let code = run([
            "rdoq",
            "calibrate",
            "--model",
            "/nonexistent/m.rdoq",
            "--calib",
            "synthetic:2:1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_IO);
    }
}
