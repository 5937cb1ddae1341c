//! Conventional head and tail rules.

use super::{BlockView, Reason, SampleDecision, Sampler};
use crate::ids::PatternId;
use crate::model::Span;

/// Keeps a fixed fraction of traces. The decision is a hash of the seed and
/// trace id, so every agent agrees on it without talking.
pub struct HeadSampler {
    seed: u64,
    rate: f64,
}

impl HeadSampler {
    pub fn new(seed: u64, rate: f64) -> Self {
        HeadSampler { seed, rate }
    }

    pub fn keeps(&self, trace_id: &str) -> bool {
        let h = PatternId::digest("head", &[&self.seed.to_le_bytes(), trace_id.as_bytes()]).0;
        ((h >> 11) as f64 / (1u64 << 53) as f64) < self.rate
    }
}

impl Sampler for HeadSampler {
    fn name(&self) -> &str {
        "head"
    }

    fn decide(&mut self, view: &BlockView<'_>) -> SampleDecision {
        if self.keeps(view.trace_id()) {
            SampleDecision::because(vec![Reason::Head])
        } else {
            SampleDecision::skip()
        }
    }
}

pub type TracePredicate = Box<dyn Fn(&[Span]) -> bool + Send>;

/// Samples when a predicate over the rebuilt spans holds.
pub struct TailSampler {
    predicate: TracePredicate,
}

impl TailSampler {
    pub fn new(predicate: impl Fn(&[Span]) -> bool + Send + 'static) -> Self {
        TailSampler {
            predicate: Box::new(predicate),
        }
    }

    /// Any span with `duration_ns >= min`.
    pub fn min_duration(min: u64) -> Self {
        TailSampler::new(move |spans| {
            spans.iter().any(|s| {
                s.metadata
                    .get("duration_ns")
                    .and_then(|d| d.parse::<u64>().ok())
                    .is_some_and(|d| d >= min)
            })
        })
    }
}

impl Sampler for TailSampler {
    fn name(&self) -> &str {
        "tail"
    }

    fn decide(&mut self, view: &BlockView<'_>) -> SampleDecision {
        if (self.predicate)(&view.spans()) {
            SampleDecision::because(vec![Reason::Tail])
        } else {
            SampleDecision::skip()
        }
    }
}
