//! Run configuration, one TOML table per module.
//!
//! ```toml
//! seed = 7
//!
//! [span_parser]
//! similarity_threshold = 0.8
//!
//! [sampler]
//! enabled = ["head"]
//! head_rate = 0.05
//! ```
//!
//! Unknown keys are rejected; missing keys take their defaults.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::collector::CollectorConfig;
use crate::sampler::SamplerConfig;
use crate::span_parser::SpanParserConfig;
use crate::trace_parser::TraceParserConfig;
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MintConfig {
    /// Seeds warm-up sampling in the pipeline.
    pub seed: u64,
    pub span_parser: SpanParserConfig,
    pub trace_parser: TraceParserConfig,
    pub agent: AgentConfig,
    pub sampler: SamplerConfig,
    pub collector: CollectorConfig,
    pub workload: WorkloadSpec,
}

impl MintConfig {
    pub fn from_toml(text: &str) -> Result<MintConfig, ConfigError> {
        let cfg: MintConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<MintConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sp = &self.span_parser;
        if !(0.0..=1.0).contains(&sp.similarity_threshold) {
            return Err(ConfigError::Invalid(format!("similarity_threshold {} not in [0, 1]", sp.similarity_threshold)));
        }
        if !(sp.alpha > 0.0 && sp.alpha < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha {} not in (0, 1)", sp.alpha)));
        }
        let tp = &self.trace_parser;
        if tp.bloom_capacity_bytes == 0 || !(tp.bloom_fpp > 0.0 && tp.bloom_fpp < 1.0) {
            return Err(ConfigError::Invalid("bloom size must be positive and fpp in (0, 1)".into()));
        }
        if self.collector.records_per_tick == 0 {
            return Err(ConfigError::Invalid("records_per_tick must be >= 1".into()));
        }
        self.sampler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.workload.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let cfg = MintConfig::from_toml("").unwrap();
        assert_eq!(cfg.span_parser.similarity_threshold, 0.8);
        assert_eq!(cfg.trace_parser.bloom_capacity(), 3418);
        assert_eq!(cfg.agent.params_buffer_bytes, 4 << 20);
    }

    #[test]
    fn sections_and_unknown_keys() {
        let cfg = MintConfig::from_toml("seed = 3\n[sampler]\nenabled = [\"head\"]\nhead_rate = 0.05\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampler.head_rate, Some(0.05));
        assert!(MintConfig::from_toml("[agent]\nbogus = 1\n").is_err());
        assert!(MintConfig::from_toml("[span_parser]\nalpha = 1.5\n").is_err());
    }
}
