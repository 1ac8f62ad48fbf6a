use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::calib::{BiasMode, CalibConfig, Granularity, InitMethod, Rounding};
use crate::error::{Error, Result};
use crate::licnet::dataset::{read_dir, synthetic_set};
use crate::licnet::{Image, TrainConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "RDOQ_SEED";
/// Keys with this prefix are bookkeeping and never configure a run.
pub const MANIFEST_PREFIX: &str = "manifest.";

/// Flat `key=value` settings. Later layers override earlier ones:
/// file, then `RDOQ_SEED`, then command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::param(format!(
                    "config line {}: expected key=value, got '{line}'",
                    n + 1
                ))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::param(format!("config line {}: empty key", n + 1)));
            }
            if !k.starts_with(MANIFEST_PREFIX) {
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Sets `key` only when a value is given.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            v.trim().parse::<u64>().map_err(|_| {
                Error::param(format!("{SEED_ENV}='{v}' is not an unsigned integer"))
            })?;
            self.set("seed", v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::param(format!("missing setting '{key}'")))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::param(format!("setting {key}='{v}' is malformed")))
            })
            .transpose()
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    /// Comma-separated list.
    pub fn list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .require(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed_or("seed", 0)
    }

    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex.
    pub fn digest(&self) -> String {
        crate::licnet::format::hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn calib_config(&self) -> Result<CalibConfig> {
        let d = CalibConfig::default();
        let cfg = CalibConfig {
            bit_width: self.parsed_or("bits", d.bit_width)?,
            steps: self.parsed_or("steps", d.steps)?,
            lr: self.parsed_or("lr", d.lr)?,
            lr_v: self.parsed_or("lr_v", d.lr_v)?,
            lambda_t: self.parsed_or("lambda_t", d.lambda_t)?,
            lambda_reg: self.parsed_or("lambda_reg", d.lambda_reg)?,
            granularity: match self.get("granularity").unwrap_or("channel") {
                "channel" => Granularity::ChannelWise,
                "layer" => Granularity::LayerWise,
                v => {
                    return Err(Error::param(format!(
                        "granularity must be channel or layer, got '{v}'"
                    )))
                }
            },
            init: match self.get("init").unwrap_or("minmax") {
                "minmax" => InitMethod::MinMax,
                "gridsearch" => InitMethod::GridSearch,
                v => {
                    return Err(Error::param(format!(
                        "init must be minmax or gridsearch, got '{v}'"
                    )))
                }
            },
            rounding: match self.get("rounding").unwrap_or("adaptive") {
                "adaptive" => Rounding::Adaptive,
                "nearest" => Rounding::Nearest,
                v => {
                    return Err(Error::param(format!(
                        "rounding must be adaptive or nearest, got '{v}'"
                    )))
                }
            },
            bias: match self.get("bias").unwrap_or("rescaled") {
                "rescaled" => BiasMode::Rescaled,
                "int32" => BiasMode::Int32,
                v => {
                    return Err(Error::param(format!(
                        "bias must be rescaled or int32, got '{v}'"
                    )))
                }
            },
            seed: self.seed()?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            steps: self.parsed_or("steps", d.steps)?,
            batch_size: self.parsed_or("batch_size", d.batch_size)?,
            lr: self.parsed_or("lr", d.lr)?,
            entropy_lr: self.parsed_or("entropy_lr", d.entropy_lr)?,
            seed: self.seed()?,
            hyperprior: self.parsed_or("hyperprior", d.hyperprior)?,
            crop: self.parsed_or("crop", d.crop)?,
            ..d
        })
    }

    pub fn workers(&self) -> Result<usize> {
        match self.parsed_or("workers", 1usize)? {
            0 => Err(Error::param("workers must be at least 1")),
            n => Ok(n),
        }
    }
}

/// Images from a directory of PGM files, or `synthetic:COUNT:SEED` for the
/// built-in 64x64 scenes.
pub fn load_images(source: &str) -> Result<Vec<Image>> {
    if let Some(rest) = source.strip_prefix("synthetic:") {
        let (count, seed) = rest
            .split_once(':')
            .ok_or_else(|| Error::param("expected synthetic:COUNT:SEED"))?;
        let count = count
            .parse()
            .map_err(|_| Error::param(format!("bad synthetic count '{count}'")))?;
        let seed = seed
            .parse()
            .map_err(|_| Error::param(format!("bad synthetic seed '{seed}'")))?;
        return Ok(synthetic_set(count, 64, seed));
    }
    let images = read_dir(Path::new(source))?;
    if images.is_empty() {
        return Err(Error::param(format!("no .pgm images in {source}")));
    }
    Ok(images)
}
