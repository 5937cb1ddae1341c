//! Per-agent reporting: pattern deltas, sealed filters and parameter
//! emissions, framed as length-prefixed envelopes and metered by kind.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, Emission, ParamBlock};
use crate::ids::PatternId;
use crate::span_parser::SpanPatternRecord;
use crate::trace_parser::{SealedBloom, SealedBloomRecord, TopoPattern};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unknown envelope kind {0}")]
    Kind(u8),
    #[error("frame length {declared} does not match {actual} bytes")]
    Length { declared: usize, actual: usize },
    #[error("bad payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvelopeKind {
    PatternDelta = 1,
    SealedBloom = 2,
    ParamEmission = 3,
}

impl EnvelopeKind {
    pub const ALL: [EnvelopeKind; 3] = [EnvelopeKind::PatternDelta, EnvelopeKind::SealedBloom, EnvelopeKind::ParamEmission];

    fn from_u8(b: u8) -> Result<Self, EnvelopeError> {
        match b {
            1 => Ok(EnvelopeKind::PatternDelta),
            2 => Ok(EnvelopeKind::SealedBloom),
            3 => Ok(EnvelopeKind::ParamEmission),
            other => Err(EnvelopeError::Kind(other)),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvelopeKind::PatternDelta => "pattern",
            EnvelopeKind::SealedBloom => "bloom",
            EnvelopeKind::ParamEmission => "params",
        }
    }
}

impl fmt::Display for EnvelopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pattern-dictionary entry as uploaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternRecord {
    Span(SpanPatternRecord),
    Topo(TopoPattern),
}

impl PatternRecord {
    pub fn id(&self) -> PatternId {
        match self {
            PatternRecord::Span(s) => s.id,
            PatternRecord::Topo(t) => t.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub agent_id: String,
    pub tick: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    /// `u32 length | kind | agent_id | tick | payload`, where the length
    /// counts everything after itself.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::new();
        body.u8(self.kind as u8).str(&self.agent_id).u64(self.tick).bytes(&self.payload);
        let body = body.finish();
        let mut out = Writer::new();
        out.u32(body.len() as u32);
        let mut out = out.finish();
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(frame: &[u8]) -> Result<Envelope, EnvelopeError> {
        let mut r = Reader::new(frame);
        let declared = r.u32()? as usize;
        if declared != frame.len() - 4 {
            return Err(EnvelopeError::Length {
                declared,
                actual: frame.len() - 4,
            });
        }
        let kind = EnvelopeKind::from_u8(r.u8()?)?;
        let agent_id = r.str()?;
        let tick = r.u64()?;
        let payload = r.bytes()?.to_vec();
        Ok(Envelope {
            kind,
            agent_id,
            tick,
            payload,
        })
    }

    pub fn wire_len(&self) -> usize {
        4 + 1 + 4 + self.agent_id.len() + 8 + 4 + self.payload.len()
    }

    pub fn pattern_delta(agent_id: &str, tick: u64, records: &[PatternRecord]) -> Envelope {
        let mut payload = Vec::new();
        for r in records {
            serde_json::to_writer(&mut payload, r).expect("pattern records serialize");
            payload.push(b'\n');
        }
        Envelope {
            kind: EnvelopeKind::PatternDelta,
            agent_id: agent_id.to_owned(),
            tick,
            payload,
        }
    }

    pub fn patterns(&self) -> Result<Vec<PatternRecord>, EnvelopeError> {
        let text = std::str::from_utf8(&self.payload).map_err(|e| EnvelopeError::Payload(e.to_string()))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| EnvelopeError::Payload(e.to_string())))
            .collect()
    }

    pub fn sealed_bloom(agent_id: &str, tick: u64, bloom: &SealedBloom) -> Envelope {
        Envelope {
            kind: EnvelopeKind::SealedBloom,
            agent_id: agent_id.to_owned(),
            tick,
            payload: serde_json::to_vec(&bloom.to_record()).expect("bloom records serialize"),
        }
    }

    pub fn bloom(&self) -> Result<SealedBloom, EnvelopeError> {
        let rec: SealedBloomRecord =
            serde_json::from_slice(&self.payload).map_err(|e| EnvelopeError::Payload(e.to_string()))?;
        SealedBloom::from_record(&rec).map_err(|e| EnvelopeError::Payload(e.to_string()))
    }

    pub fn param_emission(tick: u64, e: &Emission) -> Envelope {
        let mut w = Writer::new();
        w.str(&e.trace_id).u8(e.partial as u8).u32(e.blocks.len() as u32);
        for b in &e.blocks {
            b.write(&mut w);
        }
        Envelope {
            kind: EnvelopeKind::ParamEmission,
            agent_id: e.agent_id.clone(),
            tick,
            payload: w.finish(),
        }
    }

    pub fn emission(&self) -> Result<Emission, EnvelopeError> {
        let mut r = Reader::new(&self.payload);
        let trace_id = r.str()?;
        let partial = r.u8()? != 0;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            blocks.push(ParamBlock::read(&mut r)?);
        }
        Ok(Emission {
            trace_id,
            agent_id: self.agent_id.clone(),
            blocks,
            partial,
        })
    }
}

/// Envelope and byte counts per kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ByteMeter {
    by_kind: BTreeMap<EnvelopeKind, (u64, u64)>,
}

impl ByteMeter {
    pub fn record(&mut self, kind: EnvelopeKind, bytes: usize) {
        let e = self.by_kind.entry(kind).or_default();
        e.0 += 1;
        e.1 += bytes as u64;
    }

    pub fn bytes(&self, kind: EnvelopeKind) -> u64 {
        self.by_kind.get(&kind).map_or(0, |e| e.1)
    }

    pub fn envelopes(&self, kind: EnvelopeKind) -> u64 {
        self.by_kind.get(&kind).map_or(0, |e| e.0)
    }

    pub fn total(&self) -> u64 {
        self.by_kind.values().map(|e| e.1).sum()
    }

    pub fn merge(&mut self, other: &ByteMeter) {
        for (k, (n, b)) in &other.by_kind {
            let e = self.by_kind.entry(*k).or_default();
            e.0 += n;
            e.1 += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    /// Ingest records per logical tick.
    pub records_per_tick: u64,
    /// Ticks between pattern reports.
    pub report_interval: u64,
    /// Upload the whole library on every report instead of unacked deltas.
    pub full_resend: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            records_per_tick: 10_000,
            report_interval: 1,
            full_resend: false,
        }
    }
}

/// Acknowledgement of uploaded patterns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ack {
    pub patterns: Vec<PatternId>,
}

#[derive(Debug)]
pub struct Collector {
    agent_id: String,
    config: CollectorConfig,
    acked: HashSet<PatternId>,
    emitted: HashSet<(String, u64)>,
    partial_reported: HashSet<String>,
    meter: ByteMeter,
    last_tick: u64,
}

impl Collector {
    pub fn new(agent_id: impl Into<String>, config: CollectorConfig) -> Self {
        Collector {
            agent_id: agent_id.into(),
            config,
            acked: HashSet::new(),
            emitted: HashSet::new(),
            partial_reported: HashSet::new(),
            meter: ByteMeter::default(),
            last_tick: 0,
        }
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.config
    }

    pub fn meter(&self) -> &ByteMeter {
        &self.meter
    }

    /// Library entries the backend has not acknowledged (all of them with
    /// `full_resend`), span patterns first, each in creation order.
    pub fn pattern_delta(&self, agent: &Agent) -> Vec<PatternRecord> {
        let sp = agent.span_parser();
        let spans = sp
            .span_pattern_ids()
            .iter()
            .filter(|id| self.config.full_resend || !self.acked.contains(id))
            .filter_map(|id| sp.record(*id).ok())
            .map(PatternRecord::Span);
        let topos = agent
            .trace_parser()
            .patterns()
            .filter(|t| self.config.full_resend || !self.acked.contains(&t.id))
            .map(|t| PatternRecord::Topo(t.clone()));
        spans.chain(topos).collect()
    }

    /// Sealed filters go out at once; on report ticks a pattern delta is
    /// added (possibly empty).
    pub fn tick_report(&mut self, agent: &mut Agent, tick: u64) -> Vec<Envelope> {
        self.last_tick = self.last_tick.max(tick);
        let mut out = self.drain_blooms(agent, tick);
        if tick.is_multiple_of(self.config.report_interval.max(1)) {
            out.push(Envelope::pattern_delta(&self.agent_id, tick, &self.pattern_delta(agent)));
        }
        out
    }

    pub fn drain_blooms(&mut self, agent: &mut Agent, tick: u64) -> Vec<Envelope> {
        agent
            .take_sealed()
            .iter()
            .map(|b| Envelope::sealed_bloom(&self.agent_id, tick, b))
            .collect()
    }

    /// Envelope for a sample-mark answer. Blocks already sent are dropped,
    /// so re-marks never duplicate data; nothing is sent for empty answers.
    pub fn emit_params(&mut self, mut emission: Emission, tick: u64) -> Option<Envelope> {
        emission
            .blocks
            .retain(|b| self.emitted.insert((b.trace_id.clone(), b.created_at)));
        if emission.partial && !self.partial_reported.insert(emission.trace_id.clone()) {
            emission.partial = false;
        }
        if emission.is_empty() {
            return None;
        }
        Some(Envelope::param_emission(tick, &emission))
    }

    /// Frames an envelope for the wire and meters it. Empty pattern deltas
    /// carry nothing and are not sent.
    pub fn transmit(&mut self, env: &Envelope) -> Option<Vec<u8>> {
        if env.kind == EnvelopeKind::PatternDelta && env.payload.is_empty() {
            return None;
        }
        let frame = env.encode();
        self.meter.record(env.kind, frame.len());
        Some(frame)
    }

    pub fn ack(&mut self, ack: &Ack) {
        self.acked.extend(ack.patterns.iter().copied());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::model::{AttributeValue, IngestLine, Span};
    use crate::span_parser::SpanParserConfig;
    use crate::trace_parser::TraceParserConfig;

    fn agent() -> Agent {
        Agent::new("a0", SpanParserConfig::default(), TraceParserConfig::default(), AgentConfig::default())
    }

    fn trace(a: &mut Agent, t: &str) {
        let s = Span {
            trace_id: t.into(),
            span_id: format!("{t}-s"),
            parent_span_id: None,
            operation: "GET".into(),
            agent_id: "a0".into(),
            metadata: Default::default(),
            attributes: vec![("url".into(), AttributeValue::Str("/api/x".into()))],
        };
        a.ingest(&[s.to_line(), IngestLine::EndOfTrace { trace_id: t.into(), agent_id: None }.to_line()]);
    }

    #[test]
    fn envelope_round_trip() {
        let env = Envelope {
            kind: EnvelopeKind::SealedBloom,
            agent_id: "a7".into(),
            tick: 9,
            payload: vec![1, 2, 3],
        };
        let frame = env.encode();
        assert_eq!(frame.len(), env.wire_len());
        assert_eq!(Envelope::decode(&frame).unwrap(), env);
        assert!(matches!(Envelope::decode(&frame[..frame.len() - 1]), Err(EnvelopeError::Length { .. })));
    }

    #[test]
    fn delta_until_acked() {
        let mut a = agent();
        trace(&mut a, "t1");
        let mut c = Collector::new("a0", CollectorConfig::default());
        let envs = c.tick_report(&mut a, 0);
        let delta = envs.iter().find(|e| e.kind == EnvelopeKind::PatternDelta).unwrap();
        let recs = delta.patterns().unwrap();
        assert_eq!(recs.len(), 2);
        c.ack(&Ack {
            patterns: recs.iter().map(PatternRecord::id).collect(),
        });
        let envs = c.tick_report(&mut a, 1);
        let delta = envs.iter().find(|e| e.kind == EnvelopeKind::PatternDelta).unwrap();
        assert!(delta.payload.is_empty());
        assert_eq!(c.transmit(delta), None);
    }

    #[test]
    fn full_resend_ignores_acks() {
        let mut a = agent();
        trace(&mut a, "t1");
        let mut c = Collector::new(
            "a0",
            CollectorConfig {
                full_resend: true,
                ..Default::default()
            },
        );
        let ids: Vec<_> = c.pattern_delta(&a).iter().map(PatternRecord::id).collect();
        c.ack(&Ack { patterns: ids });
        assert_eq!(c.pattern_delta(&a).len(), 2);
    }

    #[test]
    fn sealed_blooms_go_out_immediately() {
        let mut a = agent();
        trace(&mut a, "t1");
        a.finish();
        let mut c = Collector::new(
            "a0",
            CollectorConfig {
                report_interval: 5,
                ..Default::default()
            },
        );
        let envs = c.tick_report(&mut a, 3);
        assert_eq!(envs.len(), 1);
        assert_eq!(envs[0].kind, EnvelopeKind::SealedBloom);
        let b = envs[0].bloom().unwrap();
        assert!(b.filter.contains(crate::trace_parser::BloomKey::of("t1")));
    }

    #[test]
    fn emission_is_idempotent() {
        let mut a = agent();
        trace(&mut a, "t1");
        let mut c = Collector::new("a0", CollectorConfig::default());
        let env = c.emit_params(a.on_sample_mark("t1"), 0).unwrap();
        let back = env.emission().unwrap();
        assert_eq!(back.blocks.len(), 1);
        assert_eq!(back.trace_id, "t1");
        assert!(c.emit_params(a.on_sample_mark("t1"), 1).is_none());
        assert!(c.emit_params(a.on_sample_mark("never"), 1).is_none());
    }

    #[test]
    fn meter_counts_frames() {
        let mut c = Collector::new("a0", CollectorConfig::default());
        let env = Envelope {
            kind: EnvelopeKind::ParamEmission,
            agent_id: "a0".into(),
            tick: 0,
            payload: vec![0; 10],
        };
        let frame = c.transmit(&env).unwrap();
        assert_eq!(c.meter().bytes(EnvelopeKind::ParamEmission), frame.len() as u64);
        assert_eq!(c.meter().total(), frame.len() as u64);
    }
}
