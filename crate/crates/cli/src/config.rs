//! `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nmsa_core::denoiser::DenoiserConfig;
use nmsa_core::style::ControlMode;
use thiserror::Error;

use crate::imageio::ImageFormat;

pub const SEED_ENV: &str = "NMSA_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: `{key}` = {value:?} is not a valid {expected}")]
    Type {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    EnvSeed(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_seed: u64,
    pub denoiser: DenoiserConfig,
    pub timesteps: usize,
    pub steps: usize,
    pub control: ControlMode,
    pub lambda: f32,
    pub extract_t: usize,
    pub output_dir: PathBuf,
    pub image_format: ImageFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_seed: 0,
            denoiser: DenoiserConfig::default(),
            timesteps: 1000,
            steps: 6,
            control: ControlMode::Nmsa,
            lambda: 1.0,
            extract_t: 200,
            output_dir: PathBuf::from("."),
            image_format: ImageFormat::Ppm,
        }
    }
}

pub const KEYS: [&str; 15] = [
    "seed",
    "grid_h",
    "grid_w",
    "channels",
    "model_dim",
    "heads",
    "layers",
    "vocab_slots",
    "timesteps",
    "steps",
    "control",
    "lambda",
    "extract_t",
    "output_dir",
    "image_format",
];

fn parse_value<T: FromStr>(
    line: usize,
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        line,
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

impl RunConfig {
    /// Parse config text. Missing keys keep their defaults; the result is
    /// validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            };
            if seen.contains(&known) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            let int = |v: &str| parse_value::<usize>(line, key, v, "non-negative integer");
            match known {
                "seed" => cfg.model_seed = parse_value(line, key, value, "unsigned integer")?,
                "grid_h" => cfg.denoiser.grid_h = int(value)?,
                "grid_w" => cfg.denoiser.grid_w = int(value)?,
                "channels" => cfg.denoiser.channels = int(value)?,
                "model_dim" => cfg.denoiser.model_dim = int(value)?,
                "heads" => cfg.denoiser.heads = int(value)?,
                "layers" => cfg.denoiser.layers = int(value)?,
                "vocab_slots" => cfg.denoiser.vocab_slots = int(value)?,
                "timesteps" => cfg.timesteps = int(value)?,
                "steps" => cfg.steps = int(value)?,
                "control" => cfg.control = parse_value(line, key, value, "control mode")?,
                "lambda" => cfg.lambda = parse_value(line, key, value, "real number")?,
                "extract_t" => cfg.extract_t = int(value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "image_format" => cfg.image_format = parse_value(line, key, value, "image format (ppm|png)")?,
                _ => unreachable!("every key in KEYS is handled"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Apply `NMSA_SEED` when `env_seed` is set.
    pub fn with_env_seed(mut self, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        if let Some(raw) = env_seed {
            self.model_seed = raw
                .trim()
                .parse()
                .map_err(|_| ConfigError::EnvSeed(raw.to_string()))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.denoiser
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(ConfigError::Invalid(msg)) };
        check(self.timesteps >= 1, "timesteps must be at least 1".into())?;
        check(
            (1..=self.timesteps).contains(&self.steps),
            format!("steps = {} must lie in 1..={}", self.steps, self.timesteps),
        )?;
        check(
            self.extract_t <= self.timesteps,
            format!("extract_t = {} exceeds timesteps = {}", self.extract_t, self.timesteps),
        )?;
        check(
            (0.0..=1.0).contains(&self.lambda),
            format!("lambda = {} must lie in [0, 1]", self.lambda),
        )
    }
}
