//! Sampling strategies, registered by name.
//!
//! Every completed sub-trace block is shown to each enabled sampler; a trace
//! is marked when any of them says so. Built-ins: `symptom` (abnormal words
//! and numeric outliers), `edge_case` (rare topologies), `head` (fixed rate by
//! trace id) and `tail` (predicate on the rebuilt spans).

pub mod edge_case;
pub mod rules;
pub mod symptom;

use std::collections::BTreeMap;
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

pub use edge_case::{inverse_frequency, EdgeCaseSampler};
pub use rules::{HeadSampler, TailSampler};
pub use symptom::{p95_threshold, SlidingWindow, SymptomSampler};

use crate::agent::ParamBlock;
use crate::ids::PatternId;
use crate::model::Span;
use crate::span_parser::SpanParser;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("no sampler named {0:?}")]
    UnknownSampler(String),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Samplers to build, by registry name.
    pub enabled: Vec<String>,
    pub abnormal_words: Vec<String>,
    pub quantile: f64,
    pub window: usize,
    /// Values a window needs before its threshold is used.
    pub min_window: usize,
    pub edge_case_c: f64,
    pub rng_seed: u64,
    pub head_rate: Option<f64>,
    /// Built-in tail rule: any span at least this slow.
    pub tail_min_duration_ns: Option<u64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            enabled: vec!["symptom".into(), "edge_case".into()],
            abnormal_words: vec!["ERROR".into(), "Bad Gateway".into(), "Exception".into()],
            quantile: 0.95,
            window: 10_000,
            min_window: 100,
            edge_case_c: 0.01,
            rng_seed: 0,
            head_rate: None,
            tail_min_duration_ns: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(SamplerError::InvalidConfig(format!("quantile {} not in (0, 1)", self.quantile)));
        }
        if let Some(r) = self.head_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(SamplerError::InvalidConfig(format!("head_rate {r} not in [0, 1]")));
            }
        }
        if self.window == 0 || self.min_window > self.window {
            return Err(SamplerError::InvalidConfig("need 0 < min_window <= window".into()));
        }
        if self.edge_case_c.is_nan() || self.edge_case_c < 0.0 {
            return Err(SamplerError::InvalidConfig("edge_case_c must be >= 0".into()));
        }
        Ok(())
    }
}

/// What a sampler sees of one completed sub-trace.
pub struct BlockView<'a> {
    pub block: &'a ParamBlock,
    pub topo_id: PatternId,
    pub topo_match_count: u64,
    pub total_matches: u64,
    pub parser: &'a SpanParser,
}

impl BlockView<'_> {
    pub fn trace_id(&self) -> &str {
        &self.block.trace_id
    }

    /// Share of this agent's sub-traces that matched the same topology.
    pub fn frequency(&self) -> f64 {
        if self.total_matches == 0 {
            return 1.0;
        }
        self.topo_match_count as f64 / self.total_matches as f64
    }

    /// Spans rebuilt from patterns and parameters; spans that fail to
    /// rebuild are skipped.
    pub fn spans(&self) -> Vec<Span> {
        self.block
            .spans
            .iter()
            .filter_map(|p| self.parser.reconstruct(p, &self.block.trace_id, &self.block.agent_id).ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reason {
    Word { word: String, span_id: String, value: String },
    Outlier { pattern: PatternId, position: usize, value: f64, threshold: f64 },
    EdgeCase { topo: PatternId, probability: f64 },
    Head,
    Tail,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reason::Word { word, span_id, .. } => write!(f, "word {word:?} in span {span_id}"),
            Reason::Outlier { pattern, position, value, threshold } => {
                write!(f, "outlier {value} > {threshold} at {pattern}#{position}")
            }
            Reason::EdgeCase { topo, probability } => write!(f, "edge case {topo} p={probability}"),
            Reason::Head => f.write_str("head"),
            Reason::Tail => f.write_str("tail"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleDecision {
    pub sampled: bool,
    pub reasons: Vec<Reason>,
}

impl SampleDecision {
    pub fn skip() -> Self {
        Self::default()
    }

    pub fn because(reasons: Vec<Reason>) -> Self {
        SampleDecision {
            sampled: !reasons.is_empty(),
            reasons,
        }
    }
}

pub trait Sampler: Send {
    fn name(&self) -> &str;

    fn decide(&mut self, view: &BlockView<'_>) -> SampleDecision;
}

/// Builds a sampler for one agent.
pub type SamplerFactory = Box<dyn Fn(&SamplerConfig, &str) -> Box<dyn Sampler> + Send + Sync>;

pub struct SamplerRegistry {
    factories: BTreeMap<String, SamplerFactory>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = SamplerRegistry::empty();
        r.register("symptom", |cfg, _| Box::new(SymptomSampler::new(cfg)));
        r.register("edge_case", |cfg, agent| Box::new(EdgeCaseSampler::new(cfg, agent)));
        r.register("head", |cfg, _| Box::new(HeadSampler::new(cfg.rng_seed, cfg.head_rate.unwrap_or(0.0))));
        r.register("tail", |cfg, _| Box::new(TailSampler::min_duration(cfg.tail_min_duration_ns.unwrap_or(u64::MAX))));
        r
    }
}

impl SamplerRegistry {
    /// Registry with the built-in samplers.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn empty() -> Self {
        SamplerRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces a sampler under `name`.
    pub fn register(&mut self, name: &str, f: impl Fn(&SamplerConfig, &str) -> Box<dyn Sampler> + Send + Sync + 'static) {
        self.factories.insert(name.to_owned(), Box::new(f));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, cfg: &SamplerConfig, agent_id: &str) -> Result<Box<dyn Sampler>, SamplerError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| SamplerError::UnknownSampler(name.to_owned()))?;
        Ok(f(cfg, agent_id))
    }

    /// The samplers listed in `cfg.enabled`.
    pub fn build_enabled(&self, cfg: &SamplerConfig, agent_id: &str) -> Result<SamplerSet, SamplerError> {
        cfg.validate()?;
        let samplers = cfg
            .enabled
            .iter()
            .map(|n| self.build(n, cfg, agent_id))
            .collect::<Result<_, _>>()?;
        Ok(SamplerSet { samplers })
    }
}

/// Samplers of one agent. Every sampler sees every block so that stateful
/// ones keep their windows current.
pub struct SamplerSet {
    samplers: Vec<Box<dyn Sampler>>,
}

impl SamplerSet {
    pub fn new(samplers: Vec<Box<dyn Sampler>>) -> Self {
        SamplerSet { samplers }
    }

    pub fn names(&self) -> Vec<&str> {
        self.samplers.iter().map(|s| s.name()).collect()
    }

    /// Combined decision plus the names of the samplers that fired.
    pub fn decide(&mut self, view: &BlockView<'_>) -> (SampleDecision, Vec<String>) {
        let mut out = SampleDecision::skip();
        let mut fired = Vec::new();
        for s in &mut self.samplers {
            let d = s.decide(view);
            if d.sampled {
                out.sampled = true;
                fired.push(s.name().to_owned());
                out.reasons.extend(d.reasons);
            }
        }
        (out, fired)
    }
}
