//! End-to-end run over an ingest stream: agents, samplers, collectors and
//! one backend store, all in process.
//!
//! Records are routed by `agent_id`; an end marker without an agent goes to
//! every agent. The first sampler that fires for a trace broadcasts a mark to
//! all agents, whose answers travel through their collectors to the store.
//! Once the stream is drained, every distinct trace id is queried.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, IngestReport};
use crate::backend::{BackendError, QueryResult, TraceStore};
use crate::collector::{Collector, Envelope, EnvelopeKind};
use crate::config::MintConfig;
use crate::ids::PatternId;
use crate::model::{parse_line, IngestLine, Span};
use crate::sampler::{BlockView, SamplerError, SamplerRegistry, SamplerSet};
use crate::span_parser::SpanParserError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("warm-up of agent {agent}: {source}")]
    Warmup { agent: String, source: SpanParserError },
    #[error("backend rejected a frame at record {offset}: {source}")]
    Backend { offset: usize, source: BackendError },
}

/// Machine-checkable summary of a run. Deterministic in (stream, config).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunStats {
    pub traces: u64,
    pub spans: u64,
    pub records: u64,
    pub rejected: u64,
    /// Bytes of span records (with their newline) in the input.
    pub raw_bytes: u64,

    pub stored_pattern_bytes: u64,
    pub stored_bloom_bytes: u64,
    pub stored_param_bytes: u64,
    pub stored_bytes: u64,
    pub compression_ratio: f64,

    pub net_pattern_bytes: u64,
    pub net_bloom_bytes: u64,
    pub net_param_bytes: u64,
    pub net_bytes: u64,
    /// Sample-mark broadcast traffic between agents.
    pub bus_bytes: u64,
    pub backend_received_bytes: u64,

    pub span_patterns: u64,
    pub string_patterns: u64,
    pub topo_patterns: u64,
    pub blooms: u64,

    pub sampled: u64,
    pub partial: u64,
    pub sampled_by: BTreeMap<String, u64>,

    pub query_exact: u64,
    pub query_approximate: u64,
    pub query_miss: u64,
    pub query_low_confidence: u64,

    pub half_span_patterns: u64,
    pub half_string_patterns: u64,
    pub half_topo_patterns: u64,
    pub half_net_pattern_bytes: u64,
    pub half_stored_pattern_bytes: u64,
}

impl RunStats {
    /// One `key=value` per line; maps flatten to `key.sub=value`.
    pub fn to_kv(&self) -> String {
        let serde_json::Value::Object(map) = serde_json::to_value(self).expect("stats serialize") else {
            unreachable!()
        };
        let mut out = String::new();
        for (k, v) in map {
            match v {
                serde_json::Value::Object(sub) => {
                    for (s, v) in sub {
                        out.push_str(&format!("{k}.{s}={v}\n"));
                    }
                }
                v => out.push_str(&format!("{k}={v}\n")),
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<RunStats, String> {
        let mut map = serde_json::Map::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: missing '='", n + 1))?;
            let v: serde_json::Value = serde_json::from_str(v).map_err(|e| format!("line {}: {e}", n + 1))?;
            match k.split_once('.') {
                Some((k, sub)) => {
                    let slot = map
                        .entry(k.to_owned())
                        .or_insert_with(|| serde_json::Value::Object(Default::default()));
                    if let serde_json::Value::Object(m) = slot {
                        m.insert(sub.to_owned(), v);
                    }
                }
                None => {
                    map.insert(k.to_owned(), v);
                }
            }
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())
    }
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ingest     {} traces, {} spans, {} records ({} rejected)", self.traces, self.spans, self.records, self.rejected)?;
        writeln!(f, "patterns   {} span, {} string, {} topology; {} bloom filters", self.span_patterns, self.string_patterns, self.topo_patterns, self.blooms)?;
        writeln!(f, "sampled    {} traces ({} partial)", self.sampled, self.partial)?;
        for (name, n) in &self.sampled_by {
            writeln!(f, "  by {name:<10} {n}")?;
        }
        writeln!(f, "storage    raw {} B, stored {} B (patterns {}, blooms {}, params {}), ratio {:.2}", self.raw_bytes, self.stored_bytes, self.stored_pattern_bytes, self.stored_bloom_bytes, self.stored_param_bytes, self.compression_ratio)?;
        writeln!(f, "network    {} B (patterns {}, blooms {}, params {}), marks {} B", self.net_bytes, self.net_pattern_bytes, self.net_bloom_bytes, self.net_param_bytes, self.bus_bytes)?;
        write!(f, "queries    {} exact, {} approximate ({} low confidence), {} miss", self.query_exact, self.query_approximate, self.query_low_confidence, self.query_miss)
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub stats: RunStats,
    pub store: TraceStore,
    /// Rejected records: stream offset and reason.
    pub errors: Vec<(usize, String)>,
    /// Distinct trace ids in order of first appearance.
    pub trace_ids: Vec<String>,
}

struct Node {
    agent: Agent,
    collector: Collector,
    samplers: SamplerSet,
}

struct Run {
    nodes: BTreeMap<String, Node>,
    store: TraceStore,
    marked: HashSet<String>,
    stats: RunStats,
    errors: Vec<(usize, String)>,
    rpt: u64,
}

/// Reservoir of up to `m` spans per agent, drawn over the whole stream.
fn warmup_samples(lines: &[String], m: usize, seed: u64) -> (BTreeMap<String, Vec<Span>>, Vec<String>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut samples: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    let mut trace_ids = Vec::new();
    let mut known = HashSet::new();
    let mut raw = 0u64;
    for line in lines {
        let Ok(IngestLine::Span(span)) = parse_line(line) else {
            continue;
        };
        raw += line.len() as u64 + 1;
        if known.insert(span.trace_id.clone()) {
            trace_ids.push(span.trace_id.clone());
        }
        let n = seen.entry(span.agent_id.clone()).or_default();
        *n += 1;
        let sample = samples.entry(span.agent_id.clone()).or_default();
        if sample.len() < m {
            sample.push(span);
        } else if m > 0 {
            let j = rng.gen_range(0..*n);
            if (j as usize) < m {
                sample[j as usize] = span;
            }
        }
    }
    (samples, trace_ids, raw)
}

pub fn run_pipeline(lines: &[String], cfg: &MintConfig, registry: &SamplerRegistry) -> Result<RunOutput, PipelineError> {
    let m = cfg.span_parser.warmup_sample_size;
    let (samples, trace_ids, raw_bytes) = warmup_samples(lines, m, cfg.seed);

    let mut nodes = BTreeMap::new();
    for (id, sample) in &samples {
        let mut agent = Agent::new(id.clone(), cfg.span_parser, cfg.trace_parser.clone(), cfg.agent);
        if m > 0 {
            agent.warmup(sample).map_err(|source| PipelineError::Warmup { agent: id.clone(), source })?;
        }
        nodes.insert(
            id.clone(),
            Node {
                agent,
                collector: Collector::new(id.clone(), cfg.collector),
                samplers: registry.build_enabled(&cfg.sampler, id)?,
            },
        );
    }
    let mut run = Run {
        nodes,
        store: TraceStore::new(),
        marked: HashSet::new(),
        stats: RunStats {
            traces: trace_ids.len() as u64,
            raw_bytes,
            records: lines.len() as u64,
            ..Default::default()
        },
        errors: Vec::new(),
        rpt: cfg.collector.records_per_tick.max(1),
    };

    let half = lines.len() / 2;
    for (offset, line) in lines.iter().enumerate() {
        let tick = offset as u64 / run.rpt;
        match parse_line(line) {
            Err(e) => {
                run.stats.rejected += 1;
                run.errors.push((offset, e.to_string()));
            }
            Ok(rec) => run.route(rec, offset, tick)?,
        }
        if (offset as u64 + 1).is_multiple_of(run.rpt) {
            run.report(tick, false, offset)?;
        }
        if offset + 1 == half {
            run.snapshot_half();
        }
    }

    let tick = lines.len() as u64 / run.rpt;
    let ids: Vec<String> = run.nodes.keys().cloned().collect();
    for id in &ids {
        let report = run.nodes.get_mut(id).expect("node").agent.finish();
        run.absorb(id, report, tick, lines.len())?;
    }
    run.report(tick, true, lines.len())?;
    if half == 0 {
        run.snapshot_half();
    }
    run.finalize(&trace_ids);
    Ok(RunOutput {
        stats: run.stats,
        store: run.store,
        errors: run.errors,
        trace_ids,
    })
}

impl Run {
    fn route(&mut self, rec: IngestLine, offset: usize, tick: u64) -> Result<(), PipelineError> {
        let targets: Vec<String> = match &rec {
            IngestLine::Span(s) => vec![s.agent_id.clone()],
            IngestLine::EndOfTrace { agent_id: Some(a), .. } => vec![a.clone()],
            IngestLine::EndOfTrace { agent_id: None, .. } => self.nodes.keys().cloned().collect(),
        };
        for id in targets {
            let Some(node) = self.nodes.get_mut(&id) else {
                self.stats.rejected += 1;
                self.errors.push((offset, format!("no agent {id}")));
                continue;
            };
            let mut report = IngestReport::default();
            node.agent.ingest_line(rec.clone(), offset, &mut report);
            self.absorb(&id, report, tick, offset)?;
        }
        Ok(())
    }

    /// Runs samplers over completed blocks and ships what the agent produced.
    fn absorb(&mut self, id: &str, report: IngestReport, tick: u64, offset: usize) -> Result<(), PipelineError> {
        self.stats.spans += report.spans as u64;
        self.stats.rejected += report.rejected as u64;
        self.errors.extend(report.errors);
        let mut newly_marked = Vec::new();
        {
            let node = self.nodes.get_mut(id).expect("node");
            let tp = node.agent.trace_parser();
            for c in &report.completed {
                let view = BlockView {
                    block: &c.block,
                    topo_id: c.topo_id,
                    topo_match_count: tp.pattern(c.topo_id).map_or(0, |p| p.match_count),
                    total_matches: tp.total_matches(),
                    parser: node.agent.span_parser(),
                };
                let (decision, fired) = node.samplers.decide(&view);
                if decision.sampled && self.marked.insert(c.trace_id.clone()) {
                    for name in fired {
                        *self.stats.sampled_by.entry(name).or_default() += 1;
                    }
                    newly_marked.push(c.trace_id.clone());
                }
            }
        }
        for trace_id in newly_marked {
            self.broadcast_mark(id, &trace_id, tick, offset)?;
        }
        self.ship_ready(tick, offset)
    }

    fn broadcast_mark(&mut self, from: &str, trace_id: &str, tick: u64, offset: usize) -> Result<(), PipelineError> {
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in ids {
            if id != from {
                self.stats.bus_bytes += trace_id.len() as u64;
            }
            let node = self.nodes.get_mut(&id).expect("node");
            let emission = node.agent.on_sample_mark(trace_id);
            if let Some(env) = node.collector.emit_params(emission, tick) {
                self.send(&id, &env, offset)?;
            }
        }
        Ok(())
    }

    /// Emissions that became ready and freshly sealed filters.
    fn ship_ready(&mut self, tick: u64, offset: usize) -> Result<(), PipelineError> {
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in ids {
            let node = self.nodes.get_mut(&id).expect("node");
            let mut envs: Vec<Envelope> = node.collector.drain_blooms(&mut node.agent, tick);
            for e in node.agent.take_ready() {
                envs.extend(node.collector.emit_params(e, tick));
            }
            for env in &envs {
                self.send(&id, env, offset)?;
            }
        }
        Ok(())
    }

    fn report(&mut self, tick: u64, force: bool, offset: usize) -> Result<(), PipelineError> {
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in ids {
            let node = self.nodes.get_mut(&id).expect("node");
            let mut envs = node.collector.tick_report(&mut node.agent, tick);
            let has_delta = envs.iter().any(|e| e.kind == EnvelopeKind::PatternDelta);
            if force && !has_delta {
                let delta = node.collector.pattern_delta(&node.agent);
                envs.push(Envelope::pattern_delta(&id, tick, &delta));
            }
            for env in &envs {
                self.send(&id, env, offset)?;
            }
        }
        Ok(())
    }

    fn send(&mut self, id: &str, env: &Envelope, offset: usize) -> Result<(), PipelineError> {
        let node = self.nodes.get_mut(id).expect("node");
        let Some(frame) = node.collector.transmit(env) else {
            return Ok(());
        };
        let ack = self
            .store
            .receive(&frame)
            .map_err(|source| PipelineError::Backend { offset, source })?;
        if let Some(ack) = ack {
            node.collector.ack(&ack);
        }
        Ok(())
    }

    fn pattern_counts(&self) -> (u64, u64, u64) {
        let mut spans: HashSet<PatternId> = HashSet::new();
        let mut topos: HashSet<PatternId> = HashSet::new();
        let mut strings = 0;
        for n in self.nodes.values() {
            spans.extend(n.agent.span_parser().span_pattern_ids().iter().copied());
            topos.extend(n.agent.trace_parser().patterns().map(|t| t.id));
            strings += n.agent.span_parser().string_pattern_count() as u64;
        }
        (spans.len() as u64, strings, topos.len() as u64)
    }

    fn net_pattern_bytes(&self) -> u64 {
        self.nodes
            .values()
            .map(|n| n.collector.meter().bytes(EnvelopeKind::PatternDelta))
            .sum()
    }

    fn snapshot_half(&mut self) {
        let (s, str_, t) = self.pattern_counts();
        self.stats.half_span_patterns = s;
        self.stats.half_string_patterns = str_;
        self.stats.half_topo_patterns = t;
        self.stats.half_net_pattern_bytes = self.net_pattern_bytes();
        self.stats.half_stored_pattern_bytes = self.store.storage_bytes().patterns;
    }

    fn finalize(&mut self, trace_ids: &[String]) {
        let (s, str_, t) = self.pattern_counts();
        let st = &mut self.stats;
        st.span_patterns = s;
        st.string_patterns = str_;
        st.topo_patterns = t;
        st.blooms = self.store.bloom_count() as u64;

        let bytes = self.store.storage_bytes();
        st.stored_pattern_bytes = bytes.patterns;
        st.stored_bloom_bytes = bytes.blooms;
        st.stored_param_bytes = bytes.params;
        st.stored_bytes = bytes.total();
        st.compression_ratio = if bytes.total() == 0 { 0.0 } else { st.raw_bytes as f64 / bytes.total() as f64 };

        for n in self.nodes.values() {
            let m = n.collector.meter();
            st.net_pattern_bytes += m.bytes(EnvelopeKind::PatternDelta);
            st.net_bloom_bytes += m.bytes(EnvelopeKind::SealedBloom);
            st.net_param_bytes += m.bytes(EnvelopeKind::ParamEmission);
            st.net_bytes += m.total();
        }
        st.backend_received_bytes = self.store.received().total();
        st.sampled = self.store.sampled_count() as u64;
        st.partial = self.store.sampled_entries().filter(|e| e.partial).count() as u64;

        for t in trace_ids {
            match self.store.query(t) {
                QueryResult::Exact(_) => st.query_exact += 1,
                QueryResult::Approximate(a) => {
                    st.query_approximate += 1;
                    if !a.high_confidence() {
                        st.query_low_confidence += 1;
                    }
                }
                QueryResult::Miss => st.query_miss += 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_workload, WorkloadSpec};

    #[test]
    fn kv_round_trip() {
        let mut s = RunStats {
            traces: 3,
            compression_ratio: 12.5,
            ..Default::default()
        };
        s.sampled_by.insert("head".into(), 2);
        let back = RunStats::from_kv(&s.to_kv()).unwrap();
        assert_eq!(back, s);
        assert!(RunStats::from_kv("traces").is_err());
    }

    #[test]
    fn small_run_answers_every_query() {
        let w = generate_workload(&WorkloadSpec {
            traces: 300,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = MintConfig::default();
        cfg.sampler.enabled = vec!["head".into()];
        cfg.sampler.head_rate = Some(0.1);
        let out = run_pipeline(&w.lines, &cfg, &SamplerRegistry::default()).unwrap();
        assert_eq!(out.stats.traces, 300);
        assert_eq!(out.stats.query_miss, 0);
        assert_eq!(out.stats.rejected, 0);
        assert!(out.stats.sampled > 0);
        assert_eq!(out.stats.query_exact, out.stats.sampled);
    }
}
