//! Run configuration, read from TOML.
//!
//! ```toml
//! name = "diabetes"
//!
//! [data]
//! source = "csv"                 # csv | synthetic_regression | synthetic_classification
//! path = "../data/diabetes.csv"  # relative to this file
//! schema = "diabetes.schema"
//! split_seed = 0
//!
//! [model]
//! kind = "linear_regression"     # linear_regression | logistic_binary | softmax
//!
//! [strategy]                     # see ClipStrategyConfig
//! kind = "geoclip_full"
//! sigma = 1.0
//!
//! [train]
//! learning_rate = 0.5
//! batch_size = 32
//! epochs = 5                     # or `iterations`
//! seeds = [0, 1, 2]
//!
//! [privacy]
//! delta = 1e-5
//! epsilon = 0.5                  # optional: derive σ from this target
//!
//! [sweep]                        # optional, used by `sweep`
//! learning_rates = [0.1, 0.5]
//! h2 = [1.0, 10.0]
//! epsilons = [0.5, 0.86, 0.93]
//! [[sweep.strategies]]
//! kind = "adaclip"
//! sigma = 1.0
//!
//! [output]
//! dir = "out/diabetes"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modeling::{ModelKind, SyntheticSpec};
use crate::privatizer::ClipStrategyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub strategy: ClipStrategyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    SyntheticRegression,
    SyntheticClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub features: Option<usize>,
    #[serde(default)]
    pub corr_block: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl DataConfig {
    /// Generator settings for the synthetic sources, defaults filled in.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        let base = match self.source {
            DataSource::Csv => return None,
            DataSource::SyntheticRegression => SyntheticSpec::regression(self.seed),
            DataSource::SyntheticClassification => SyntheticSpec::classification(self.seed),
        };
        Some(SyntheticSpec {
            samples: self.samples.unwrap_or(base.samples),
            features: self.features.unwrap_or(base.features),
            corr_block: self.corr_block.unwrap_or(base.corr_block),
            rho: self.rho.unwrap_or(base.rho),
            noise: self.noise.unwrap_or(base.noise),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Evaluate once per epoch.
    #[serde(default)]
    pub epochs: Option<u64>,
    /// Evaluate after every iteration.
    #[serde(default)]
    pub iterations: Option<u64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// When set, σ is solved for this ε and overrides `strategy.sigma`.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

fn default_delta() -> f64 {
    1e-5
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self { delta: default_delta(), epsilon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_h2_grid")]
    pub h2: Vec<f64>,
    /// Target budgets; empty means one cell at each strategy's own σ.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub strategies: Vec<ClipStrategyConfig>,
}

fn default_h2_grid() -> Vec<f64> {
    vec![1.0, 10.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

impl RunConfig {
    /// Parses TOML, applies `key.path = value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            let value = (!value.is_empty()).then(|| parse_value(value));
            set_key(&mut doc, key, value)?;
        }
        let config: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.path, &mut config.data.schema].into_iter().flatten() {
            *p = crate::modeling::resolve(base, p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if t.epochs.is_some() == t.iterations.is_some() {
            return bad("set exactly one of train.epochs and train.iterations".into());
        }
        if t.seeds.is_empty() {
            return bad("train.seeds is empty".into());
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return bad(format!("privacy.delta must lie in (0, 1), got {}", self.privacy.delta));
        }
        if let Some(eps) = self.privacy.epsilon {
            if !(eps > 0.0) {
                return bad(format!("privacy.epsilon must be positive, got {eps}"));
            }
        }
        if self.data.source == DataSource::Csv && (self.data.path.is_none() || self.data.schema.is_none()) {
            return bad("csv data needs `path` and `schema`".into());
        }
        self.strategy.validate()?;
        if let Some(s) = &self.sweep {
            if s.learning_rates.is_empty() || s.strategies.is_empty() || s.h2.is_empty() {
                return bad("sweep needs learning_rates, h2 and strategies".into());
            }
            if let Some(lr) = s.learning_rates.iter().find(|lr| !(**lr > 0.0)) {
                return bad(format!("sweep learning rate must be positive, got {lr}"));
            }
            for strategy in &s.strategies {
                strategy.validate()?;
            }
        }
        Ok(())
    }
}

/// An empty override value removes the key.
/// A bare override value is read as TOML when it parses, else as a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(doc: &mut toml::Table, key: &str, value: Option<toml::Value>) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut table = doc;
    for part in parts {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    match value {
        Some(v) => table.insert(last.to_string(), v),
        None => table.remove(last),
    };
    Ok(())
}
