//! Inter-trace parsing: sub-trace topology patterns and metadata mounting.
//!
//! Spans of one trace on one node form a sub-trace. Its shape, written over
//! span pattern ids, is matched exactly against the topology library, and the
//! trace id is mounted into a Bloom filter attached to the matched pattern.

pub mod bloom;
pub mod topology;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bloom::{BloomFilter, BloomKey, SealedBloom, SealedBloomRecord};
pub use topology::{assemble_subtrace, canonical_order, encode_topology, topo_pattern, RootKind, SubTrace, SubTraceSpan, TopoNode, TopoPattern};

use crate::ids::PatternId;
use crate::model::TraceMetadata;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceParserError {
    #[error("sub-trace has no spans")]
    EmptySubTrace,
    #[error("parent links of span {0} form a cycle")]
    CyclicParentLinks(String),
    #[error("span id {0} appears twice in one sub-trace")]
    DuplicateSpanId(String),
    #[error("unknown topology pattern {0}")]
    UnknownPattern(PatternId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceParserConfig {
    pub bloom_capacity_bytes: usize,
    pub bloom_fpp: f64,
}

impl Default for TraceParserConfig {
    fn default() -> Self {
        TraceParserConfig {
            bloom_capacity_bytes: 4096,
            bloom_fpp: 0.01,
        }
    }
}

impl TraceParserConfig {
    /// Insertions a filter takes before it is sealed.
    pub fn bloom_capacity(&self) -> u64 {
        bloom::optimal_capacity(self.bloom_capacity_bytes as u64 * 8, self.bloom_fpp)
    }

    pub fn bloom_hashes(&self) -> u32 {
        bloom::optimal_hashes(self.bloom_capacity_bytes as u64 * 8, self.bloom_capacity())
    }
}

#[derive(Debug)]
struct Slot {
    pattern: TopoPattern,
    live: BloomFilter,
    sealed: u64,
}

/// Topology library of one agent.
#[derive(Debug)]
pub struct TraceParser {
    config: TraceParserConfig,
    capacity: u64,
    hashes: u32,
    slots: HashMap<PatternId, Slot>,
    order: Vec<PatternId>,
    total_matches: u64,
}

impl TraceParser {
    pub fn new(config: TraceParserConfig) -> Self {
        TraceParser {
            capacity: config.bloom_capacity(),
            hashes: config.bloom_hashes(),
            config,
            slots: HashMap::new(),
            order: Vec::new(),
            total_matches: 0,
        }
    }

    pub fn config(&self) -> &TraceParserConfig {
        &self.config
    }

    pub fn bloom_capacity(&self) -> u64 {
        self.capacity
    }

    /// Exact-match lookup; a miss inserts a new pattern with an empty filter.
    /// Returns the topology id and whether it was new.
    pub fn process_subtrace(&mut self, st: &SubTrace) -> (PatternId, bool) {
        let pattern = topo_pattern(st);
        let id = pattern.id;
        self.total_matches += 1;
        let mut new = false;
        let slot = self.slots.entry(id).or_insert_with(|| {
            new = true;
            Slot {
                pattern,
                live: BloomFilter::with_bytes(self.config.bloom_capacity_bytes, self.hashes),
                sealed: 0,
            }
        });
        slot.pattern.match_count += 1;
        if new {
            self.order.push(id);
        }
        (id, new)
    }

    /// Inserts the trace id into the pattern's live filter. A full filter is
    /// sealed (and returned) before the insert that would overfill it.
    pub fn mount_metadata(&mut self, topo_id: PatternId, md: &TraceMetadata) -> Result<Option<SealedBloom>, TraceParserError> {
        let capacity = self.capacity;
        let fresh = BloomFilter::with_bytes(self.config.bloom_capacity_bytes, self.hashes);
        let slot = self.slots.get_mut(&topo_id).ok_or(TraceParserError::UnknownPattern(topo_id))?;
        let mut flushed = None;
        if slot.live.inserted() >= capacity {
            flushed = Some(SealedBloom {
                topo_id,
                seq_no: slot.sealed,
                filter: std::mem::replace(&mut slot.live, fresh),
            });
            slot.sealed += 1;
        }
        slot.live.insert(BloomKey::of(&md.trace_id));
        Ok(flushed)
    }

    /// Seals every non-empty live filter, e.g. at end of input.
    pub fn seal_all(&mut self) -> Vec<SealedBloom> {
        let mut out = Vec::new();
        for id in &self.order {
            let slot = self.slots.get_mut(id).expect("ordered id has a slot");
            if slot.live.inserted() == 0 {
                continue;
            }
            let fresh = BloomFilter::with_bytes(self.config.bloom_capacity_bytes, self.hashes);
            out.push(SealedBloom {
                topo_id: *id,
                seq_no: slot.sealed,
                filter: std::mem::replace(&mut slot.live, fresh),
            });
            slot.sealed += 1;
        }
        out
    }

    /// Whether the live filter of `topo_id` reports `trace_id`.
    pub fn live_contains(&self, topo_id: PatternId, trace_id: &str) -> bool {
        self.slots
            .get(&topo_id)
            .is_some_and(|s| s.live.contains(BloomKey::of(trace_id)))
    }

    pub fn pattern(&self, id: PatternId) -> Option<&TopoPattern> {
        self.slots.get(&id).map(|s| &s.pattern)
    }

    /// Patterns in insertion order.
    pub fn patterns(&self) -> impl Iterator<Item = &TopoPattern> {
        self.order.iter().map(|id| &self.slots[id].pattern)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn total_matches(&self) -> u64 {
        self.total_matches
    }

    /// `match_count / total_matches` for the pattern.
    pub fn frequency(&self, id: PatternId) -> Option<f64> {
        let slot = self.slots.get(&id)?;
        (self.total_matches > 0).then(|| slot.pattern.match_count as f64 / self.total_matches as f64)
    }
}
