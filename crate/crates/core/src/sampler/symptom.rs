//! Symptom sampler: abnormal words in string parameters and numeric values
//! above a sliding-window quantile.

use std::collections::{HashMap, VecDeque};

use super::{BlockView, Reason, SampleDecision, Sampler, SamplerConfig, SamplerError};
use crate::ids::PatternId;
use crate::span_parser::Param;

/// Metadata fields checked alongside the parameters.
const STATUS_KEY: &str = "status_code";
const DURATION_KEY: &str = "duration_ns";
/// Window position used for `duration_ns`.
pub const DURATION_POSITION: usize = usize::MAX;

/// 1-based nearest rank `ceil(q * n)`, tolerant of `q * n` landing a hair
/// above an integer.
fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (r as usize).clamp(1, n)
}

/// Nearest-rank `q`-quantile of `window`.
pub fn p95_threshold(window: &[f64], q: f64) -> Result<f64, SamplerError> {
    if window.is_empty() {
        return Err(SamplerError::EmptyWindow);
    }
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Last `cap` values in arrival order plus a sorted copy for quantiles.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    cap: usize,
    arrival: VecDeque<f64>,
    sorted: Vec<f64>,
}

impl SlidingWindow {
    pub fn new(cap: usize) -> Self {
        SlidingWindow {
            cap: cap.max(1),
            arrival: VecDeque::new(),
            sorted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.arrival.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrival.is_empty()
    }

    pub fn push(&mut self, v: f64) {
        if self.arrival.len() == self.cap {
            let old = self.arrival.pop_front().expect("full window");
            let at = self.sorted.partition_point(|x| x.total_cmp(&old).is_lt());
            self.sorted.remove(at);
        }
        self.arrival.push_back(v);
        let at = self.sorted.partition_point(|x| x.total_cmp(&v).is_le());
        self.sorted.insert(at, v);
    }

    pub fn quantile(&self, q: f64) -> Result<f64, SamplerError> {
        if self.sorted.is_empty() {
            return Err(SamplerError::EmptyWindow);
        }
        Ok(self.sorted[nearest_rank(q, self.sorted.len()) - 1])
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.arrival.iter()
    }
}

pub struct SymptomSampler {
    words: Vec<(String, String)>,
    quantile: f64,
    window: usize,
    min_window: usize,
    windows: HashMap<(PatternId, usize), SlidingWindow>,
}

impl SymptomSampler {
    pub fn new(cfg: &SamplerConfig) -> Self {
        SymptomSampler {
            words: cfg
                .abnormal_words
                .iter()
                .filter(|w| !w.is_empty())
                .map(|w| (w.clone(), w.to_lowercase()))
                .collect(),
            quantile: cfg.quantile,
            window: cfg.window,
            min_window: cfg.min_window,
            windows: HashMap::new(),
        }
    }

    /// Current threshold of one numeric position, if warm.
    pub fn threshold(&self, pattern: PatternId, position: usize) -> Option<f64> {
        let w = self.windows.get(&(pattern, position))?;
        if w.len() < self.min_window {
            return None;
        }
        w.quantile(self.quantile).ok()
    }

    fn check_words(&self, span_id: &str, value: &str, reasons: &mut Vec<Reason>) {
        if self.words.is_empty() {
            return;
        }
        let lower = value.to_lowercase();
        for (word, needle) in &self.words {
            if lower.contains(needle.as_str()) {
                reasons.push(Reason::Word {
                    word: word.clone(),
                    span_id: span_id.to_owned(),
                    value: value.to_owned(),
                });
            }
        }
    }

    /// Compares against the window as it was before `value`, then records it.
    fn observe(&mut self, pattern: PatternId, position: usize, value: f64, reasons: &mut Vec<Reason>) {
        if let Some(threshold) = self.threshold(pattern, position) {
            if value > threshold {
                reasons.push(Reason::Outlier {
                    pattern,
                    position,
                    value,
                    threshold,
                });
            }
        }
        let cap = self.window;
        self.windows
            .entry((pattern, position))
            .or_insert_with(|| SlidingWindow::new(cap))
            .push(value);
    }
}

impl Sampler for SymptomSampler {
    fn name(&self) -> &str {
        "symptom"
    }

    fn decide(&mut self, view: &BlockView<'_>) -> SampleDecision {
        let mut reasons = Vec::new();
        for span in &view.block.spans {
            for (pos, p) in span.params.iter().enumerate() {
                match p {
                    Param::Str(s) => self.check_words(&span.span_id, s, &mut reasons),
                    Param::Num(n) => self.observe(span.pattern_id, pos, n.magnitude(), &mut reasons),
                }
            }
            if let Some(status) = span.metadata.get(STATUS_KEY) {
                self.check_words(&span.span_id, status, &mut reasons);
            }
            if let Some(d) = span.metadata.get(DURATION_KEY).and_then(|d| d.parse::<f64>().ok()) {
                self.observe(span.pattern_id, DURATION_POSITION, d, &mut reasons);
            }
        }
        SampleDecision::because(reasons)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ParamBlock;
    use crate::span_parser::{SpanParams, SpanParser};

    #[test]
    fn nearest_rank_examples() {
        let w: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(p95_threshold(&w, 0.95), Ok(95.0));
        assert_eq!(p95_threshold(&[5.0, 5.0, 5.0], 0.95), Ok(5.0));
        assert_eq!(p95_threshold(&[], 0.95), Err(SamplerError::EmptyWindow));
        assert_eq!(p95_threshold(&[3.0, 1.0, 2.0], 0.5), Ok(2.0));
    }

    #[test]
    fn sliding_window_drops_oldest() {
        let mut w = SlidingWindow::new(3);
        for v in [10.0, 1.0, 2.0, 3.0] {
            w.push(v);
        }
        assert_eq!(w.values().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(w.quantile(0.99), Ok(3.0));
    }

    fn block(spans: Vec<SpanParams>) -> ParamBlock {
        ParamBlock::new("t".into(), "a0".into(), spans, 0)
    }

    fn params(pattern: u64, status: &str, duration: u64) -> SpanParams {
        SpanParams {
            span_id: "s".into(),
            parent_span_id: None,
            pattern_id: PatternId(pattern),
            metadata: [
                ("status_code".to_string(), status.to_string()),
                ("duration_ns".to_string(), duration.to_string()),
            ]
            .into(),
            params: vec![Param::Str("user 42".into())],
        }
    }

    fn decide(s: &mut SymptomSampler, b: &ParamBlock) -> SampleDecision {
        let parser = SpanParser::default();
        s.decide(&BlockView {
            block: b,
            topo_id: PatternId(0),
            topo_match_count: 1,
            total_matches: 1,
            parser: &parser,
        })
    }

    #[test]
    fn abnormal_word_in_status() {
        let cfg = SamplerConfig {
            abnormal_words: vec!["502".into(), "ERROR".into()],
            ..Default::default()
        };
        let mut s = SymptomSampler::new(&cfg);
        let d = decide(&mut s, &block(vec![params(1, "502 Bad Gateway", 10)]));
        assert!(d.sampled);
        assert!(matches!(&d.reasons[0], Reason::Word { word, .. } if word == "502"));
        let d = decide(&mut s, &block(vec![params(1, "200 OK", 10)]));
        assert!(!d.sampled);
    }

    #[test]
    fn outlier_after_warm_window() {
        let mut s = SymptomSampler::new(&SamplerConfig::default());
        for i in 0..100 {
            let d = decide(&mut s, &block(vec![params(1, "200 OK", 1000 + i)]));
            assert!(!d.sampled, "cold window fired at {i}");
        }
        let t = s.threshold(PatternId(1), DURATION_POSITION).unwrap();
        assert_eq!(t, 1094.0);
        let d = decide(&mut s, &block(vec![params(1, "200 OK", 1095)]));
        assert!(matches!(d.reasons.as_slice(), [Reason::Outlier { value, .. }] if *value == 1095.0));
        // other patterns keep their own windows
        assert!(!decide(&mut s, &block(vec![params(2, "200 OK", 1_000_000)])).sampled);
    }
}
