//! Per-node runtime: span parsing, sub-trace parsing and the params buffer.

pub mod buffer;

use std::collections::{HashMap, HashSet, VecDeque};

use serde::Deserialize;

pub use buffer::{BufferError, ParamBlock, ParamsBuffer};

use crate::ids::PatternId;
use crate::model::{parse_line, IngestLine, ModelError, Span, TraceMetadata};
use crate::span_parser::{SpanParams, SpanParser, SpanParserConfig, SpanParserError};
use crate::trace_parser::{assemble_subtrace, SealedBloom, SubTraceSpan, TraceParser, TraceParserConfig, TraceParserError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub params_buffer_bytes: usize,
    /// Records without a new span after which a trace's sub-trace is closed.
    pub subtrace_idle_gap: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            params_buffer_bytes: 4 << 20,
            subtrace_idle_gap: 1000,
        }
    }
}

/// A sub-trace that was just closed and parsed.
#[derive(Debug, Clone)]
pub struct CompletedSubTrace {
    pub trace_id: String,
    pub topo_id: PatternId,
    pub new_topo: bool,
    pub block: ParamBlock,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub spans: usize,
    pub rejected: usize,
    /// Record offset within the batch and the reason.
    pub errors: Vec<(usize, String)>,
    pub span_patterns_minted: usize,
    pub string_patterns_minted: usize,
    pub topo_patterns_minted: usize,
    pub blocks_buffered: usize,
    pub blocks_evicted: usize,
    pub completed: Vec<CompletedSubTrace>,
}

impl IngestReport {
    pub fn patterns_minted(&self) -> usize {
        self.span_patterns_minted + self.string_patterns_minted + self.topo_patterns_minted
    }

    fn reject(&mut self, offset: usize, reason: String) {
        self.rejected += 1;
        self.errors.push((offset, reason));
    }
}

/// Answer to a sample mark.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub trace_id: String,
    pub agent_id: String,
    pub blocks: Vec<ParamBlock>,
    /// Some of the trace's blocks were evicted before the mark arrived.
    pub partial: bool,
}

impl Emission {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && !self.partial
    }
}

#[derive(Debug)]
struct Pending {
    spans: Vec<(SpanParams, String)>,
    first_seen: u64,
    last_seen: u64,
}

#[derive(Debug)]
pub struct Agent {
    id: String,
    config: AgentConfig,
    span_parser: SpanParser,
    trace_parser: TraceParser,
    buffer: ParamsBuffer,
    pending: HashMap<String, Pending>,
    idle: VecDeque<(u64, String)>,
    clock: u64,
    next_block: u64,
    marked: HashSet<String>,
    evicted: HashSet<String>,
    ready: Vec<Emission>,
    sealed: Vec<SealedBloom>,
}

impl Agent {
    pub fn new(id: impl Into<String>, span: SpanParserConfig, trace: TraceParserConfig, config: AgentConfig) -> Self {
        Agent {
            id: id.into(),
            config,
            span_parser: SpanParser::new(span),
            trace_parser: TraceParser::new(trace),
            buffer: ParamsBuffer::new(config.params_buffer_bytes),
            pending: HashMap::new(),
            idle: VecDeque::new(),
            clock: 0,
            next_block: 0,
            marked: HashSet::new(),
            evicted: HashSet::new(),
            ready: Vec::new(),
            sealed: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn warmup(&mut self, sample: &[Span]) -> Result<usize, SpanParserError> {
        self.span_parser.warmup(sample)
    }

    pub fn span_parser(&self) -> &SpanParser {
        &self.span_parser
    }

    pub fn trace_parser(&self) -> &TraceParser {
        &self.trace_parser
    }

    pub fn buffer(&self) -> &ParamsBuffer {
        &self.buffer
    }

    pub fn pending_traces(&self) -> usize {
        self.pending.len()
    }

    /// Parses and ingests raw ingest lines.
    pub fn ingest<S: AsRef<str>>(&mut self, batch: &[S]) -> IngestReport {
        let mut report = IngestReport::default();
        for (offset, line) in batch.iter().enumerate() {
            match parse_line(line.as_ref()) {
                Ok(l) => self.ingest_line(l, offset, &mut report),
                Err(e) => report.reject(offset, e.to_string()),
            }
        }
        report
    }

    /// Ingests one decoded line. `offset` is only used in error reports.
    pub fn ingest_line(&mut self, line: IngestLine, offset: usize, report: &mut IngestReport) {
        self.clock += 1;
        match line {
            IngestLine::Span(span) => {
                if span.agent_id != self.id {
                    let e = ModelError::MalformedRecord(format!("span for agent {} routed to {}", span.agent_id, self.id));
                    report.reject(offset, e.to_string());
                } else {
                    self.accept_span(&span, report);
                }
            }
            IngestLine::EndOfTrace { trace_id, agent_id } => {
                if agent_id.is_none_or(|a| a == self.id) {
                    self.complete(&trace_id, report, offset);
                }
            }
        }
        self.expire_idle(report, offset);
    }

    fn accept_span(&mut self, span: &Span, report: &mut IngestReport) {
        let parsed = self.span_parser.parse(span);
        report.spans += 1;
        report.span_patterns_minted += parsed.new_span_pattern as usize;
        report.string_patterns_minted += parsed.new_string_patterns;
        let clock = self.clock;
        let p = self.pending.entry(span.trace_id.clone()).or_insert_with(|| Pending {
            spans: Vec::new(),
            first_seen: clock,
            last_seen: clock,
        });
        p.last_seen = clock;
        p.spans.push((parsed.params, span.operation.clone()));
        self.idle.push_back((clock, span.trace_id.clone()));
    }

    fn expire_idle(&mut self, report: &mut IngestReport, offset: usize) {
        let gap = self.config.subtrace_idle_gap;
        while let Some((seen, _)) = self.idle.front() {
            if seen + gap > self.clock {
                break;
            }
            let (seen, trace_id) = self.idle.pop_front().expect("front exists");
            if self.pending.get(&trace_id).is_some_and(|p| p.last_seen == seen) {
                self.complete(&trace_id, report, offset);
            }
        }
    }

    /// Closes the pending sub-trace of `trace_id`, if any.
    fn complete(&mut self, trace_id: &str, report: &mut IngestReport, offset: usize) {
        let Some(pending) = self.pending.remove(trace_id) else {
            return;
        };
        let sub_spans = pending
            .spans
            .iter()
            .map(|(p, op)| SubTraceSpan {
                span_id: p.span_id.clone(),
                parent_span_id: p.parent_span_id.clone(),
                pattern_id: p.pattern_id,
                operation: op.clone(),
            })
            .collect();
        let st = match assemble_subtrace(trace_id, &self.id, sub_spans) {
            Ok(st) => st,
            Err(e) => {
                report.reject(offset, e.to_string());
                return;
            }
        };
        let (topo_id, new_topo) = self.trace_parser.process_subtrace(&st);
        report.topo_patterns_minted += new_topo as usize;
        let md = metadata_of(trace_id, &pending.spans);
        match self.trace_parser.mount_metadata(topo_id, &md) {
            Ok(Some(sealed)) => self.sealed.push(sealed),
            Ok(None) => {}
            Err(TraceParserError::UnknownPattern(_)) | Err(_) => unreachable!("pattern was just processed"),
        }
        let spans = pending.spans.into_iter().map(|(p, _)| p).collect();
        let block = ParamBlock::new(trace_id.to_owned(), self.id.clone(), spans, self.next_block);
        self.next_block += 1;
        report.completed.push(CompletedSubTrace {
            trace_id: trace_id.to_owned(),
            topo_id,
            new_topo,
            block: block.clone(),
        });
        if self.marked.contains(trace_id) {
            self.ready.push(Emission {
                trace_id: trace_id.to_owned(),
                agent_id: self.id.clone(),
                blocks: vec![block],
                partial: false,
            });
            return;
        }
        match self.buffer.push(block) {
            Ok(evicted) => {
                report.blocks_buffered += 1;
                report.blocks_evicted += evicted.len();
                self.evicted.extend(evicted.into_iter().map(|b| b.trace_id));
            }
            Err(e) => {
                report.reject(offset, e.to_string());
                self.evicted.insert(trace_id.to_owned());
            }
        }
    }

    /// Closes every pending sub-trace (oldest first) and seals all live
    /// filters.
    pub fn finish(&mut self) -> IngestReport {
        let mut report = IngestReport::default();
        let mut open: Vec<(u64, String)> = self.pending.iter().map(|(t, p)| (p.first_seen, t.clone())).collect();
        open.sort_unstable();
        for (_, t) in open {
            self.complete(&t, &mut report, 0);
        }
        self.idle.clear();
        self.sealed.extend(self.trace_parser.seal_all());
        report
    }

    /// Hands over every buffered block of `trace_id`. Blocks of the trace
    /// that complete later are emitted as soon as they do (see
    /// [`Agent::take_ready`]).
    pub fn on_sample_mark(&mut self, trace_id: &str) -> Emission {
        self.marked.insert(trace_id.to_owned());
        Emission {
            trace_id: trace_id.to_owned(),
            agent_id: self.id.clone(),
            blocks: self.buffer.take(trace_id),
            partial: self.evicted.contains(trace_id),
        }
    }

    pub fn is_marked(&self, trace_id: &str) -> bool {
        self.marked.contains(trace_id)
    }

    /// Emissions of marked traces whose blocks completed after the mark.
    pub fn take_ready(&mut self) -> Vec<Emission> {
        std::mem::take(&mut self.ready)
    }

    /// Sealed filters not yet handed to the collector, in seal order.
    pub fn take_sealed(&mut self) -> Vec<SealedBloom> {
        std::mem::take(&mut self.sealed)
    }
}

fn metadata_of(trace_id: &str, spans: &[(SpanParams, String)]) -> TraceMetadata {
    let start_ns = spans
        .iter()
        .filter_map(|(p, _)| p.metadata.get("start_ns")?.parse::<u64>().ok())
        .min();
    let entry_service = spans
        .iter()
        .find(|(p, _)| p.parent_span_id.is_none())
        .and_then(|(p, _)| p.metadata.get("service").cloned());
    TraceMetadata {
        trace_id: trace_id.to_owned(),
        start_ns,
        entry_service,
    }
}
