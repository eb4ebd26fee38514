//! Project configuration: one TOML file; secrets come from the environment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cogchain_core::agent::BinningMode;
use cogchain_core::extraction::{ExtractionSettings, ProviderConfig};
use cogchain_core::trace::GroupingConfig;
use cogchain_core::ModelConfig;

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "cogchain.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub batch_size: usize,
    pub max_retries: usize,
    pub semantic: ProviderConfig,
    pub chain: ProviderConfig,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        let s = ExtractionSettings::default();
        Self {
            batch_size: s.batch_size,
            max_retries: s.max_retries,
            semantic: ProviderConfig::default(),
            chain: ProviderConfig::default(),
        }
    }
}

impl ExtractionConfig {
    pub fn settings(&self) -> ExtractionSettings {
        ExtractionSettings {
            batch_size: self.batch_size,
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub calib_tasks: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { calib_tasks: 5 }
    }
}

/// Where agent scoring takes its base difficulties from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSource {
    /// The annotated fit if present, else the raw fit.
    #[default]
    Fit,
    /// Built-in reference coefficients.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub bin_count: usize,
    pub binning: BinningMode,
    pub coefficients: CoefficientSource,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            bin_count: 4,
            binning: BinningMode::PerType,
            coefficients: CoefficientSource::Fit,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grouping: GroupingConfig,
    pub model: ModelConfig,
    pub extraction: ExtractionConfig,
    pub cv: CvConfig,
    pub agent: AgentConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or `<project>/cogchain.toml`, or falls back to defaults.
    pub fn load(explicit: Option<&Path>, project_root: &Path) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = project_root.join(CONFIG_FILE);
                if !p.is_file() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("config [model]: {e}")))?;
        if self.extraction.batch_size == 0 {
            return Err(CliError::Config("config [extraction]: batch_size must be ≥ 1".into()));
        }
        if self.agent.bin_count == 0 {
            return Err(CliError::Config("config [agent]: bin_count must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form; API keys are never serialized.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
