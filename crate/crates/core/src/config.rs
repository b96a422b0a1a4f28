//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::SyntheticConfig;
use crate::corpus::{FilterConfig, Horizon};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::portfolio::UniverseFilter;
use crate::retrieval::{RetrieverKind, DEFAULT_HALF_LIFE_DAYS};
use crate::training::TrainConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Articles file (JSON lines). Without it a synthetic corpus is generated.
    pub articles: Option<PathBuf>,
    pub prices: Option<PathBuf>,
    /// One trading date per line; weekdays over the price range when absent.
    pub calendar: Option<PathBuf>,
    pub universe: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Explicit boundaries override the fractions.
    pub train_end: Option<NaiveDate>,
    pub validation_end: Option<NaiveDate>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_end: None,
            validation_end: None,
            train_fraction: 0.6,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// `recent`, `finsim` or `timefinsim`.
    pub kind: String,
    pub half_life_days: f64,
    pub embed_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            kind: "recent".into(),
            half_life_days: DEFAULT_HALF_LIFE_DAYS,
            embed_dim: crate::retrieval::HashedTfIdf::DEFAULT_DIM,
        }
    }
}

impl RetrievalConfig {
    pub fn retriever(&self) -> Result<RetrieverKind> {
        RetrieverKind::parse(&self.kind, self.half_life_days)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_replicates: usize,
    pub staleness_buckets: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_replicates: crate::evaluation::DEFAULT_BOOTSTRAP_REPLICATES,
            staleness_buckets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    pub cost_rate: f64,
    pub universe: UniverseFilter,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            cost_rate: crate::portfolio::DEFAULT_COST_RATE,
            universe: UniverseFilter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: data generation, initialization, batch order and bootstrap.
    pub seed: u64,
    /// Training seeds for multi-seed runs.
    pub seeds: Vec<u64>,
    pub horizons: Vec<u32>,
    /// Horizon used for finetuning.
    pub horizon: u32,
    /// Context articles stored per sample (the model reads the last `n_contexts`).
    pub max_history: usize,
    pub vocab_size: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub portfolio: PortfolioConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            seeds: vec![1, 2, 3],
            horizons: vec![7, 30],
            horizon: 7,
            max_history: 20,
            vocab_size: 2000,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            filter: FilterConfig::default(),
            split: SplitConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
            portfolio: PortfolioConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(String::new, |s| text[s].lines().next().unwrap_or("").to_string());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn horizons(&self) -> Result<Vec<Horizon>> {
        self.horizons.iter().map(|&h| Horizon::from_days(h)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.horizons()?;
        Horizon::from_days(self.horizon)?;
        if !self.horizons.contains(&self.horizon) {
            return Err(Error::config("horizon", "must be one of `horizons`"));
        }
        if self.vocab_size < 8 {
            return Err(Error::config("vocab_size", "must be at least 8"));
        }
        if self.max_history < self.model.n_contexts {
            return Err(Error::config("max_history", "must be at least model.n_contexts"));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.retrieval.retriever()?;
        if self.retrieval.embed_dim == 0 {
            return Err(Error::config("retrieval.embed_dim", "must be positive"));
        }
        Ok(())
    }
}
