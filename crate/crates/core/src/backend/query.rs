//! Trace queries: exact rebuilds for sampled traces, approximate ones from
//! patterns for everything else.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use super::stitch::{filter_false_positive, stitch_segments, Confidence, Link, SegmentRef};
use super::{BackendError, OpCounter, TraceStore};
use crate::agent::Emission;
use crate::ids::PatternId;
use crate::model::Span;
use crate::span_parser::SpanParams;
use crate::trace_parser::{assemble_subtrace, canonical_order, topo_pattern, BloomKey, RootKind, SubTraceSpan, TopoPattern};

#[derive(Debug, Clone, PartialEq)]
pub struct ExactTrace {
    pub trace_id: String,
    pub spans: Vec<Span>,
}

/// One span position of an approximate trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxNode {
    pub pattern: PatternId,
    pub operation: String,
    /// Parent node within the same segment.
    pub parent: Option<usize>,
    pub root: Option<RootKind>,
    /// Attributes with variables masked and numbers shown as intervals.
    pub attributes: Vec<(String, String)>,
    /// The original span, when parameters were emitted for this segment.
    pub span: Option<Span>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub topo_id: PatternId,
    pub agent_id: String,
    pub confidence: Confidence,
    pub nodes: Vec<ApproxNode>,
}

impl Segment {
    pub fn is_exact(&self) -> bool {
        !self.nodes.is_empty() && self.nodes.iter().all(|n| n.span.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximateTrace {
    pub trace_id: String,
    pub segments: Vec<Segment>,
    pub links: Vec<Link>,
    pub fragmented: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryResult {
    Exact(ExactTrace),
    Approximate(ApproximateTrace),
    Miss,
}

impl QueryResult {
    pub fn kind(&self) -> &'static str {
        match self {
            QueryResult::Exact(_) => "exact",
            QueryResult::Approximate(_) => "approximate",
            QueryResult::Miss => "miss",
        }
    }
}

impl ApproximateTrace {
    /// Whether every segment is backed by more than a Bloom hit alone.
    pub fn high_confidence(&self) -> bool {
        self.segments.iter().all(|s| s.confidence == Confidence::High)
    }

    /// Indented tree: one line per span, segments nested under the span
    /// that called them.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "trace {} (approximate{})",
            self.trace_id,
            if self.fragmented { ", fragmented" } else { "" }
        );
        for si in 0..self.segments.len() {
            self.render_segment(si, None, 1, &mut out);
        }
        out
    }

    /// Renders one root of a segment, or all roots not hung under a caller.
    fn render_segment(&self, si: usize, only_root: Option<usize>, depth: usize, out: &mut String) {
        for (ni, n) in self.segments[si].nodes.iter().enumerate() {
            if n.parent.is_some() {
                continue;
            }
            let wanted = match only_root {
                Some(r) => r == ni,
                None => !self.links.iter().any(|l| l.child == (si, ni)),
            };
            if wanted {
                self.render_node(si, ni, depth, out);
            }
        }
    }

    fn render_node(&self, si: usize, ni: usize, depth: usize, out: &mut String) {
        let seg = &self.segments[si];
        let n = &seg.nodes[ni];
        let _ = write!(out, "{}{}", "  ".repeat(depth), n.operation);
        if n.parent.is_none() {
            let conf = if seg.confidence == Confidence::High { "" } else { ", low confidence" };
            let _ = write!(out, " [{} {}{}]", seg.agent_id, seg.topo_id, conf);
        }
        match &n.span {
            Some(s) => {
                for (k, v) in &s.attributes {
                    let _ = write!(out, " {k}={v}");
                }
            }
            None => {
                for (k, v) in &n.attributes {
                    let _ = write!(out, " {k}={v}");
                }
            }
        }
        out.push('\n');
        for (c, child) in seg.nodes.iter().enumerate() {
            if child.parent == Some(ni) {
                self.render_node(si, c, depth + 1, out);
            }
        }
        for l in self.links.iter().filter(|l| l.parent == (si, ni)) {
            self.render_segment(l.child.0, Some(l.child.1), depth + 1, out);
        }
    }
}

impl ExactTrace {
    pub fn render(&self) -> String {
        let mut out = format!("trace {} (exact)\n", self.trace_id);
        for s in &self.spans {
            out.push_str(&s.to_line());
            out.push('\n');
        }
        out
    }
}

impl TraceStore {
    /// Topology patterns (with agent) whose filters report `trace_id`.
    fn candidates(&self, trace_id: &str) -> Vec<(PatternId, String)> {
        let key = BloomKey::of(trace_id);
        let mut out = BTreeSet::new();
        let mut probes = 0;
        for (topo, set) in &self.blooms {
            for b in set {
                probes += 1;
                if b.filter.contains(key) {
                    out.insert((*topo, b.agent_id.clone()));
                }
            }
        }
        OpCounter::add(&self.ops.bloom_probes, probes);
        out.into_iter().collect()
    }

    pub fn query(&self, trace_id: &str) -> QueryResult {
        OpCounter::add(&self.ops.queries, 1);
        let candidates = self.candidates(trace_id);
        let emissions = match self.sampled.get(trace_id) {
            Some(_) => self.emissions_of(trace_id),
            None => Vec::new(),
        };
        let complete = self.sampled.get(trace_id).is_some_and(|e| !e.partial);
        if complete {
            if let Ok(spans) = self.rebuild(trace_id, &emissions) {
                return QueryResult::Exact(ExactTrace {
                    trace_id: trace_id.to_owned(),
                    spans,
                });
            }
        }
        if candidates.is_empty() {
            return QueryResult::Miss;
        }
        QueryResult::Approximate(self.approximate(trace_id, &candidates, &emissions))
    }

    fn rebuild(&self, trace_id: &str, emissions: &[&Emission]) -> Result<Vec<Span>, BackendError> {
        let mut spans = Vec::new();
        for e in emissions {
            for b in &e.blocks {
                for p in &b.spans {
                    spans.push(self.rebuild_span(p, trace_id, &e.agent_id)?);
                }
            }
        }
        Ok(spans)
    }

    fn rebuild_span(&self, p: &SpanParams, trace_id: &str, agent_id: &str) -> Result<Span, BackendError> {
        let missing = || BackendError::IncompleteParams { agent: agent_id.to_owned() };
        let rec = self.span_pattern(p.pattern_id).ok_or_else(missing)?;
        let attributes = rec.apply(&p.params).map_err(|_| missing())?;
        Ok(Span {
            trace_id: trace_id.to_owned(),
            span_id: p.span_id.clone(),
            parent_span_id: p.parent_span_id.clone(),
            operation: rec.operation.clone(),
            agent_id: agent_id.to_owned(),
            metadata: p.metadata.clone(),
            attributes,
        })
    }

    /// Spans of the blocks of `agent_id` whose topology is `topo`, in the
    /// pattern's canonical node order.
    fn exact_segment(&self, trace_id: &str, topo: &TopoPattern, agent_id: &str, emissions: &[&Emission]) -> Option<Vec<Span>> {
        for e in emissions.iter().filter(|e| e.agent_id == agent_id) {
            for b in &e.blocks {
                let sub = b
                    .spans
                    .iter()
                    .map(|s| SubTraceSpan {
                        span_id: s.span_id.clone(),
                        parent_span_id: s.parent_span_id.clone(),
                        pattern_id: s.pattern_id,
                        operation: String::new(),
                    })
                    .collect();
                let Ok(st) = assemble_subtrace(trace_id, agent_id, sub) else {
                    continue;
                };
                if topo_pattern(&st).id != topo.id {
                    continue;
                }
                let order = canonical_order(&st);
                let spans: Result<Vec<Span>, _> = order
                    .iter()
                    .map(|&(i, _, _)| self.rebuild_span(&b.spans[i], trace_id, agent_id))
                    .collect();
                if let Ok(s) = spans {
                    return Some(s);
                }
            }
        }
        None
    }

    fn approximate(&self, trace_id: &str, candidates: &[(PatternId, String)], emissions: &[&Emission]) -> ApproximateTrace {
        let topos: Vec<(&TopoPattern, &str)> = candidates
            .iter()
            .filter_map(|(id, agent)| self.topo_pattern(*id).map(|t| (t, agent.as_str())))
            .collect();
        let refs: Vec<SegmentRef<'_>> = topos.iter().map(|&(topo, agent_id)| SegmentRef { topo, agent_id }).collect();
        let stitched = stitch_segments(&refs);
        let exact: Vec<Option<Vec<Span>>> = refs
            .iter()
            .map(|r| self.exact_segment(trace_id, r.topo, r.agent_id, emissions))
            .collect();
        let backed: Vec<bool> = exact.iter().map(Option::is_some).collect();
        let confidence = filter_false_positive(&refs, &stitched, &backed);

        let mut masks: HashMap<PatternId, Vec<(String, String)>> = HashMap::new();
        let segments = refs
            .iter()
            .zip(exact)
            .zip(confidence)
            .map(|((r, exact), confidence)| {
                let nodes = r
                    .topo
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| ApproxNode {
                        pattern: n.pattern,
                        operation: n.operation.clone(),
                        parent: n.parent,
                        root: n.root,
                        attributes: masks
                            .entry(n.pattern)
                            .or_insert_with(|| self.span_pattern(n.pattern).map(|p| p.masked_attributes()).unwrap_or_default())
                            .clone(),
                        span: exact.as_ref().map(|s| s[i].clone()),
                    })
                    .collect();
                Segment {
                    topo_id: r.topo.id,
                    agent_id: r.agent_id.to_owned(),
                    confidence,
                    nodes,
                }
            })
            .collect();
        ApproximateTrace {
            trace_id: trace_id.to_owned(),
            segments,
            links: stitched.links,
            fragmented: stitched.fragmented,
        }
    }

    /// Substitutes emitted parameters into every segment of an approximate
    /// trace. Fails naming the first agent whose segment has no parameters.
    pub fn reconstruct_exact(&self, approx: &ApproximateTrace, emissions: &[&Emission]) -> Result<ExactTrace, BackendError> {
        let mut spans = Vec::new();
        for seg in &approx.segments {
            let topo = self
                .topo_pattern(seg.topo_id)
                .ok_or_else(|| BackendError::IncompleteParams { agent: seg.agent_id.clone() })?;
            let got = self
                .exact_segment(&approx.trace_id, topo, &seg.agent_id, emissions)
                .ok_or_else(|| BackendError::IncompleteParams { agent: seg.agent_id.clone() })?;
            spans.extend(got);
        }
        Ok(ExactTrace {
            trace_id: approx.trace_id.clone(),
            spans,
        })
    }
}
