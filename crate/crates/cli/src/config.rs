use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hybrid_vi::dmm::{Activation, MlpArchitecture};
use hybrid_vi::io::OutputStamp;
use hybrid_vi::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LinearRe,
    ProbitRe,
    GaussianDmm,
    BernoulliDmm,
}

impl Family {
    pub fn is_dmm(self) -> bool {
        matches!(self, Family::GaussianDmm | Family::BernoulliDmm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Hidden widths for the DMM families.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Gibbs sweeps per step for the probit families.
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
}

fn default_sweeps() -> usize {
    5
}

impl ModelSpec {
    pub fn architecture(&self, n_inputs: usize) -> anyhow::Result<MlpArchitecture> {
        Ok(MlpArchitecture::new(n_inputs, self.hidden.clone(), self.activation)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub j: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            j: hybrid_vi::evaluate::DEFAULT_J,
            r: hybrid_vi::evaluate::DEFAULT_R,
            seed: 0,
        }
    }
}

/// Everything a fit needs; loaded from JSON, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            ConfigError(format!(
                "{}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
            .into()
        })
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train_config
            .validate()
            .map_err(|e| ConfigError(format!("train_config: {e}")))?;
        if !self.train.is_file() {
            bail!(ConfigError(format!("train: dataset {} does not exist", self.train.display())));
        }
        if let Some(t) = &self.test {
            if !t.is_file() {
                bail!(ConfigError(format!("test: dataset {} does not exist", t.display())));
            }
        }
        if self.model.family.is_dmm() && self.model.hidden.is_empty() {
            bail!(ConfigError("model.hidden: DMM families need at least one hidden layer".into()));
        }
        if !self.model.family.is_dmm() && !self.model.hidden.is_empty() {
            bail!(ConfigError("model.hidden: only DMM families take hidden layers".into()));
        }
        if self.model.sweeps == 0 {
            bail!(ConfigError("model.sweeps must be at least 1".into()));
        }
        if self.eval.j == 0 || self.eval.r == 0 {
            bail!(ConfigError("eval.j and eval.r must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash covers everything except `out_dir`.
    pub fn stamp(&self) -> anyhow::Result<OutputStamp> {
        let hashed = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(OutputStamp {
            config_hash: config_hash(&hashed)?,
            seed: self.train_config.seed,
        })
    }
}

/// SHA-256 of the compact JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> anyhow::Result<String> {
    let text = serde_json::to_string(value).context("serializing config for hashing")?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid(pub Vec<f64>);

/// Parses `lo:hi:n` into `n` evenly spaced points, or a comma list.
pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| format!("bad lower bound `{}`", parts[0]))?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| format!("bad upper bound `{}`", parts[1]))?;
        let n: usize = parts[2].trim().parse().map_err(|_| format!("bad point count `{}`", parts[2]))?;
        if n < 2 {
            return Err("grid needs at least 2 points".into());
        }
        return Ok(Grid((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("cannot parse `{p}` as a number")))
        .collect::<Result<_, _>>()
        .map(Grid)
}
