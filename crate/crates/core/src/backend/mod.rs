//! Storage engine and querier.
//!
//! The store keeps span and topology dictionaries, the sealed Bloom filters of
//! every topology, the parameter log of sampled traces and an index over the
//! sampled traces. Queries probe the filters for a trace id and rebuild the
//! trace from patterns, substituting parameters wherever they were emitted.

pub mod persist;
pub mod query;
pub mod stitch;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use query::{ApproxNode, ApproximateTrace, ExactTrace, QueryResult, Segment};
pub use stitch::{filter_false_positive, stitch_segments, Confidence, Link, SegmentRef, Stitched};

use crate::agent::Emission;
use crate::collector::{Ack, ByteMeter, Envelope, EnvelopeError, EnvelopeKind, PatternRecord};
use crate::ids::PatternId;
use crate::span_parser::{SpanParams, SpanPatternRecord};
use crate::trace_parser::{assemble_subtrace, topo_pattern, BloomFilter, SubTraceSpan, TopoPattern};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store file {file}: {detail}")]
    Corrupt { file: String, detail: String },
    #[error("unsupported store version {0:?}")]
    Version(String),
    #[error("parameters missing for agent {agent}")]
    IncompleteParams { agent: String },
}

/// A sealed filter as kept by the backend. `seq` numbers the filters of one
/// topology in arrival order across agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredBloom {
    pub topo_id: PatternId,
    pub seq: u64,
    pub agent_id: String,
    pub agent_seq: u64,
    pub filter: BloomFilter,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledEntry {
    pub trace_id: String,
    pub partial: bool,
    pub agents: BTreeSet<String>,
    pub topos: BTreeSet<PatternId>,
    pub start_ns: Option<u64>,
}

/// Operation counters, for checking that queries never scan the corpus.
#[derive(Debug, Default)]
pub struct OpCounter {
    pub queries: AtomicU64,
    pub bloom_probes: AtomicU64,
    pub dict_lookups: AtomicU64,
    pub param_lookups: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpSnapshot {
    pub queries: u64,
    pub bloom_probes: u64,
    pub dict_lookups: u64,
    pub param_lookups: u64,
}

impl OpCounter {
    pub fn snapshot(&self) -> OpSnapshot {
        OpSnapshot {
            queries: self.queries.load(Ordering::Relaxed),
            bloom_probes: self.bloom_probes.load(Ordering::Relaxed),
            dict_lookups: self.dict_lookups.load(Ordering::Relaxed),
            param_lookups: self.param_lookups.load(Ordering::Relaxed),
        }
    }

    fn add(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

/// Bytes the store occupies on disk, by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StorageBytes {
    pub patterns: u64,
    pub blooms: u64,
    pub params: u64,
}

impl StorageBytes {
    pub fn total(&self) -> u64 {
        self.patterns + self.blooms + self.params
    }
}

#[derive(Debug, Default)]
pub struct TraceStore {
    span_patterns: HashMap<PatternId, SpanPatternRecord>,
    span_order: Vec<PatternId>,
    topo_patterns: HashMap<PatternId, TopoPattern>,
    topo_order: Vec<PatternId>,
    blooms: BTreeMap<PatternId, Vec<StoredBloom>>,
    emissions: Vec<Emission>,
    by_trace: HashMap<String, Vec<usize>>,
    sampled: BTreeMap<String, SampledEntry>,
    received: ByteMeter,
    bytes: StorageBytes,
    ops: OpCounter,
}

impl TraceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decodes and applies one wire frame.
    pub fn receive(&mut self, frame: &[u8]) -> Result<Option<Ack>, BackendError> {
        let env = Envelope::decode(frame)?;
        self.received.record(env.kind, frame.len());
        self.apply(&env)
    }

    pub fn apply(&mut self, env: &Envelope) -> Result<Option<Ack>, BackendError> {
        match env.kind {
            EnvelopeKind::PatternDelta => {
                let records = env.patterns()?;
                let ack = Ack {
                    patterns: records.iter().map(PatternRecord::id).collect(),
                };
                for r in records {
                    self.add_pattern(r);
                }
                Ok(Some(ack))
            }
            EnvelopeKind::SealedBloom => {
                let b = env.bloom()?;
                self.add_bloom(&env.agent_id, b.topo_id, b.seq_no, b.filter);
                Ok(None)
            }
            EnvelopeKind::ParamEmission => {
                self.add_emission(env.emission()?);
                Ok(None)
            }
        }
    }

    /// Inserts a dictionary entry unless its id is already known.
    pub fn add_pattern(&mut self, r: PatternRecord) -> bool {
        match r {
            PatternRecord::Span(s) => {
                if self.span_patterns.contains_key(&s.id) {
                    return false;
                }
                self.bytes.patterns += persist::dict_line(&s).len() as u64;
                self.span_order.push(s.id);
                self.span_patterns.insert(s.id, s);
            }
            PatternRecord::Topo(t) => {
                if self.topo_patterns.contains_key(&t.id) {
                    return false;
                }
                self.bytes.patterns += persist::dict_line(&t).len() as u64;
                self.topo_order.push(t.id);
                self.topo_patterns.insert(t.id, t);
            }
        }
        true
    }

    pub fn add_bloom(&mut self, agent_id: &str, topo_id: PatternId, agent_seq: u64, filter: BloomFilter) {
        let set = self.blooms.entry(topo_id).or_default();
        let b = StoredBloom {
            topo_id,
            seq: set.len() as u64,
            agent_id: agent_id.to_owned(),
            agent_seq,
            filter,
        };
        self.bytes.blooms += persist::encode_bloom(&b).len() as u64;
        set.push(b);
    }

    pub fn add_emission(&mut self, e: Emission) {
        if e.blocks.is_empty() && !e.partial {
            return;
        }
        self.bytes.params += persist::encode_emission(&e).len() as u64;
        let entry = self.sampled.entry(e.trace_id.clone()).or_insert_with(|| SampledEntry {
            trace_id: e.trace_id.clone(),
            ..Default::default()
        });
        entry.partial |= e.partial;
        entry.agents.insert(e.agent_id.clone());
        for b in &e.blocks {
            if let Some(id) = block_topology(&b.spans) {
                entry.topos.insert(id);
            }
            let start = b
                .spans
                .iter()
                .filter_map(|s| s.metadata.get("start_ns")?.parse::<u64>().ok())
                .min();
            entry.start_ns = match (entry.start_ns, start) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
        self.by_trace.entry(e.trace_id.clone()).or_default().push(self.emissions.len());
        self.emissions.push(e);
    }

    pub fn span_pattern(&self, id: PatternId) -> Option<&SpanPatternRecord> {
        OpCounter::add(&self.ops.dict_lookups, 1);
        self.span_patterns.get(&id)
    }

    pub fn topo_pattern(&self, id: PatternId) -> Option<&TopoPattern> {
        OpCounter::add(&self.ops.dict_lookups, 1);
        self.topo_patterns.get(&id)
    }

    pub fn span_patterns(&self) -> impl Iterator<Item = &SpanPatternRecord> {
        self.span_order.iter().map(|id| &self.span_patterns[id])
    }

    pub fn topo_patterns(&self) -> impl Iterator<Item = &TopoPattern> {
        self.topo_order.iter().map(|id| &self.topo_patterns[id])
    }

    pub fn span_pattern_count(&self) -> usize {
        self.span_order.len()
    }

    pub fn topo_pattern_count(&self) -> usize {
        self.topo_order.len()
    }

    pub fn blooms(&self) -> impl Iterator<Item = &StoredBloom> {
        self.blooms.values().flatten()
    }

    pub fn bloom_count(&self) -> usize {
        self.blooms.values().map(Vec::len).sum()
    }

    /// Emissions of one trace in arrival order.
    pub fn emissions_of(&self, trace_id: &str) -> Vec<&Emission> {
        OpCounter::add(&self.ops.param_lookups, 1);
        self.by_trace
            .get(trace_id)
            .map(|ix| ix.iter().map(|&i| &self.emissions[i]).collect())
            .unwrap_or_default()
    }

    pub fn emissions(&self) -> &[Emission] {
        &self.emissions
    }

    pub fn sampled(&self, trace_id: &str) -> Option<&SampledEntry> {
        self.sampled.get(trace_id)
    }

    pub fn sampled_entries(&self) -> impl Iterator<Item = &SampledEntry> {
        self.sampled.values()
    }

    pub fn sampled_count(&self) -> usize {
        self.sampled.len()
    }

    /// Sampled traces that contain a segment of `topo_id`.
    pub fn list_by_topo(&self, topo_id: PatternId) -> Vec<&str> {
        self.sampled
            .values()
            .filter(|e| e.topos.contains(&topo_id))
            .map(|e| e.trace_id.as_str())
            .collect()
    }

    /// Sampled traces starting in `[from_ns, to_ns)`.
    pub fn list_by_time(&self, from_ns: u64, to_ns: u64) -> Vec<&str> {
        self.sampled
            .values()
            .filter(|e| e.start_ns.is_some_and(|s| s >= from_ns && s < to_ns))
            .map(|e| e.trace_id.as_str())
            .collect()
    }

    pub fn received(&self) -> &ByteMeter {
        &self.received
    }

    pub fn ops(&self) -> OpSnapshot {
        self.ops.snapshot()
    }

    /// On-disk size by category; the sampled index counts as parameters.
    pub fn storage_bytes(&self) -> StorageBytes {
        let mut b = self.bytes;
        b.patterns += persist::MANIFEST.len() as u64;
        b.params += self.sampled.values().map(|e| persist::dict_line(e).len() as u64).sum::<u64>();
        b
    }
}

/// Topology id of the sub-trace formed by a block's spans.
pub fn block_topology(spans: &[SpanParams]) -> Option<PatternId> {
    let sub = spans
        .iter()
        .map(|s| SubTraceSpan {
            span_id: s.span_id.clone(),
            parent_span_id: s.parent_span_id.clone(),
            pattern_id: s.pattern_id,
            operation: String::new(),
        })
        .collect();
    assemble_subtrace("", "", sub).ok().map(|st| topo_pattern(&st).id)
}
