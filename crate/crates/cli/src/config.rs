//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use imbopt::data::{make_gaussian_mixture, ImbalanceProfile, MixtureSpec, Split};
use imbopt::diagnostics::MidConfig;
use imbopt::model::{Activation, ModelSpec};
use imbopt::optim::TrainConfig;
use imbopt::theory::BatteryConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub profile: ImbalanceProfile,
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub offset: f64,
    /// Fixes the data draw for every seed; by default each seed draws its
    /// own dataset.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetConfig {
    pub fn data_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }

    pub fn generate(&self, run_seed: u64) -> imbopt::Result<Split> {
        let spec = MixtureSpec {
            dim: self.dim,
            separation: self.separation,
            offset: self.offset,
        };
        make_gaussian_mixture(&self.profile, &spec, self.data_seed(run_seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_init_scale() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            activation: default_activation(),
            init_scale: default_init_scale(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            classes,
            init_scale: self.init_scale,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One training experiment: a dataset, a model, and one or more algorithm
/// blocks that are run on the same data for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub runs: Vec<TrainConfig>,
    #[serde(default)]
    pub mid: MidConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.runs.is_empty() {
            bail!("`runs` must list at least one algorithm block");
        }
        if self.seeds.is_empty() {
            bail!("`seeds` must not be empty");
        }
        self.dataset.profile.counts().context("`dataset.profile`")?;
        self.model.spec(self.dataset.dim, 2).validate().context("`model`")?;
        for (i, r) in self.runs.iter().enumerate() {
            r.validate().with_context(|| format!("`runs[{i}]`"))?;
        }
        let mid = &self.mid;
        if !(mid.delta > 0.0 && mid.r_star > 0.0 && mid.r_star <= 1.0) {
            bail!("`mid.delta` must be positive and `mid.r_star` in (0, 1]");
        }
        Ok(())
    }
}

/// Dataset-only file for `gen-data`. Experiment files are accepted too; their
/// training sections are ignored.
#[derive(Clone, Debug, Deserialize)]
pub struct DataFile {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// Battery settings for `theory`; every field is optional.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryFile {
    pub schema_version: u32,
    #[serde(default)]
    pub battery: BatteryConfig,
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        bail!("`schema_version` = {v} is not supported (expected {SCHEMA_VERSION})");
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))
}

/// serde_json errors already carry line and column.
fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse(path, &read(path)?)?;
    cfg.validate()
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

pub fn load_data(path: &Path) -> Result<DataFile> {
    let cfg: DataFile = parse(path, &read(path)?)?;
    check_version(cfg.schema_version)?;
    cfg.dataset.profile.counts().context("`dataset.profile`")?;
    Ok(cfg)
}

pub fn load_theory(path: &Path) -> Result<BatteryConfig> {
    let cfg: TheoryFile = parse(path, &read(path)?)?;
    check_version(cfg.schema_version)?;
    Ok(cfg.battery)
}

/// Parses `"a,b,c"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed `{}` in --seeds", p.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("--seeds is empty");
    }
    Ok(seeds)
}
