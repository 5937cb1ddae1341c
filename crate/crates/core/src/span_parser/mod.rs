//! Inter-span parsing: per-attribute parsers warmed up offline, then online
//! matching of every span into a span pattern plus its variable parameters.

pub mod lcs;
pub mod library;
pub mod numeric;
pub mod prefix_tree;
pub mod template;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Deserialize;
use thiserror::Error;

pub use lcs::{lcs_len, lcs_similarity};
pub use library::{AttrPattern, AttrRecord, Param, SpanParams, SpanPattern, SpanPatternRecord, StringPattern};
pub use numeric::{bucket_index, bucket_interval, NumericBucket, NumericParam};
pub use prefix_tree::PrefixTree;
pub use template::Template;

use crate::ids::PatternId;
use crate::model::{AttributeValue, Span};
use crate::token::{tokenize_with_gaps, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpanParserError {
    #[error("warmup sample is empty")]
    EmptySample,
    #[error("unknown span pattern {0}")]
    UnknownPattern(PatternId),
    #[error("parameters do not fit pattern {pattern}: {detail}")]
    ParamMismatch { pattern: PatternId, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanParserConfig {
    pub similarity_threshold: f64,
    pub alpha: f64,
    pub warmup_sample_size: usize,
}

impl Default for SpanParserConfig {
    fn default() -> Self {
        SpanParserConfig {
            similarity_threshold: 0.8,
            alpha: 0.5,
            warmup_sample_size: 5000,
        }
    }
}

/// Greedy first-fit clustering: a value joins the first cluster whose first
/// member is at least `threshold` similar, otherwise founds a new cluster.
/// Returns member indices per cluster.
pub fn cluster_strings<T: PartialEq>(values: &[Vec<T>], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        match clusters
            .iter_mut()
            .find(|c| lcs_similarity(&values[c[0]], v) >= threshold)
        {
            Some(c) => c.push(i),
            None => clusters.push(vec![i]),
        }
    }
    clusters
}

#[derive(Debug, Default, Clone)]
struct StringParser {
    tree: PrefixTree,
    // live patterns indexed by the first token of their representative
    by_first: HashMap<Option<Token>, Vec<PatternId>>,
}

/// Outcome of parsing one span.
#[derive(Debug, Clone)]
pub struct ParsedSpan {
    pub params: SpanParams,
    pub new_span_pattern: bool,
    pub new_string_patterns: usize,
}

impl ParsedSpan {
    pub fn pattern_id(&self) -> PatternId {
        self.params.pattern_id
    }
}

#[derive(Debug, Clone, Default)]
pub struct SpanParser {
    config: SpanParserConfig,
    string_parsers: BTreeMap<String, StringParser>,
    numeric_keys: BTreeSet<String>,
    strings: HashMap<PatternId, StringPattern>,
    spans: HashMap<PatternId, SpanPattern>,
    span_order: Vec<PatternId>,
}

impl SpanParser {
    pub fn new(config: SpanParserConfig) -> Self {
        SpanParser {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &SpanParserConfig {
        &self.config
    }

    /// Offline stage: clusters the string values of each attribute, builds
    /// the per-attribute parsers and registers the span patterns of the
    /// sample. Only the first `warmup_sample_size` spans are used.
    pub fn warmup(&mut self, sample: &[Span]) -> Result<usize, SpanParserError> {
        if sample.is_empty() {
            return Err(SpanParserError::EmptySample);
        }
        let sample = &sample[..sample.len().min(self.config.warmup_sample_size)];

        let mut values: BTreeMap<&str, (Vec<&str>, HashMap<&str, u64>)> = BTreeMap::new();
        for span in sample {
            for (key, value) in &span.attributes {
                match value {
                    AttributeValue::Str(s) => {
                        let (order, counts) = values.entry(key).or_default();
                        let c = counts.entry(s).or_insert(0);
                        if *c == 0 {
                            order.push(s);
                        }
                        *c += 1;
                    }
                    AttributeValue::Num(_) => {
                        self.numeric_keys.insert(key.clone());
                    }
                }
            }
        }

        for (key, (order, counts)) in values {
            let tokens: Vec<Vec<Token>> = order.iter().map(|v| tokenize_with_gaps(v)).collect();
            for cluster in cluster_strings(&tokens, self.config.similarity_threshold) {
                let members: Vec<&[Token]> = cluster.iter().map(|&i| tokens[i].as_slice()).collect();
                let template = Template::extract(&members).unwrap_or(Template(Vec::new()));
                let size = cluster.iter().map(|&i| counts[order[i]]).sum();
                self.add_string_pattern(key, template, size, tokens[cluster[0]].clone());
            }
        }

        for span in sample {
            self.parse(span);
        }
        Ok(self.spans.len())
    }

    fn add_string_pattern(&mut self, key: &str, template: Template, size: u64, representative: Vec<Token>) -> PatternId {
        let id = StringPattern::id_for(key, &template);
        let parser = self.string_parsers.entry(key.to_owned()).or_default();
        parser.tree.insert(&template, id);
        let slot = parser.by_first.entry(representative.first().cloned()).or_default();
        if !slot.contains(&id) {
            slot.push(id);
        }
        self.strings
            .entry(id)
            .and_modify(|p| p.origin_cluster_size += size)
            .or_insert(StringPattern {
                id,
                key: key.to_owned(),
                template,
                origin_cluster_size: size,
                representative,
            });
        id
    }

    /// Online stage for one string attribute. Returns the pattern, its
    /// parameters and whether a new pattern was created.
    fn parse_string(&mut self, key: &str, value: &str) -> (PatternId, Vec<String>, bool) {
        let tokens = tokenize_with_gaps(value);
        let parser = self.string_parsers.entry(key.to_owned()).or_default();
        if let Some((id, params)) = parser.tree.find(&tokens) {
            return (id, params, false);
        }

        // re-cluster against live patterns sharing the first token
        let first = tokens.first().cloned();
        let candidates = parser.by_first.get(&first).cloned().unwrap_or_default();
        for cid in candidates {
            let parent = &self.strings[&cid];
            if lcs_similarity(&parent.representative, &tokens) < self.config.similarity_threshold {
                continue;
            }
            let merged = parent.template.merge(&tokens);
            if merged == parent.template {
                continue;
            }
            let (old_template, size, rep) = (
                parent.template.clone(),
                parent.origin_cluster_size,
                parent.representative.clone(),
            );
            let parser = self.string_parsers.get_mut(key).expect("parser exists");
            parser.tree.remove(&old_template);
            if let Some(slot) = parser.by_first.get_mut(&first) {
                slot.retain(|id| *id != cid);
            }
            let id = self.add_string_pattern(key, merged, size + 1, rep);
            let parser = &self.string_parsers[key];
            let (found, params) = parser
                .tree
                .find(&tokens)
                .expect("generalized template covers the value");
            debug_assert_eq!(found, id);
            return (found, params, true);
        }

        let template = Template::literal(&tokens);
        let id = self.add_string_pattern(key, template, 1, tokens);
        (id, Vec::new(), true)
    }

    /// Maps a combination of attribute patterns to its span pattern id,
    /// minting a new pattern for unseen combinations.
    pub fn combine_patterns(&mut self, attrs: Vec<(String, AttrPattern)>, operation: &str) -> (PatternId, bool) {
        let pattern = SpanPattern::new(operation, attrs);
        let id = pattern.id;
        if self.spans.contains_key(&id) {
            return (id, false);
        }
        self.spans.insert(id, pattern);
        self.span_order.push(id);
        (id, true)
    }

    /// Hierarchical attribute parsing of one span.
    pub fn parse(&mut self, span: &Span) -> ParsedSpan {
        let mut attrs = Vec::with_capacity(span.attributes.len());
        let mut params = Vec::new();
        let mut new_strings = 0;
        for (key, value) in &span.attributes {
            match value {
                AttributeValue::Str(s) => {
                    let (id, extracted, minted) = self.parse_string(key, s);
                    new_strings += minted as usize;
                    attrs.push((key.clone(), AttrPattern::Str(id)));
                    params.extend(extracted.into_iter().map(Param::Str));
                }
                AttributeValue::Num(d) => {
                    self.numeric_keys.insert(key.clone());
                    let (bucket, p) = numeric::encode(*d, self.config.alpha);
                    attrs.push((key.clone(), AttrPattern::Num(bucket)));
                    params.push(Param::Num(p));
                }
            }
        }
        let (pattern_id, new_span_pattern) = self.combine_patterns(attrs, &span.operation);
        ParsedSpan {
            params: SpanParams {
                span_id: span.span_id.clone(),
                parent_span_id: span.parent_span_id.clone(),
                pattern_id,
                metadata: span.metadata.clone(),
                params,
            },
            new_span_pattern,
            new_string_patterns: new_strings,
        }
    }

    /// Number of attribute parsers (one per attribute key and value kind).
    pub fn parser_count(&self) -> usize {
        self.string_parsers.len() + self.numeric_keys.len()
    }

    pub fn span_pattern_count(&self) -> usize {
        self.spans.len()
    }

    pub fn string_pattern_count(&self) -> usize {
        self.strings.len()
    }

    pub fn span_pattern(&self, id: PatternId) -> Option<&SpanPattern> {
        self.spans.get(&id)
    }

    pub fn string_pattern(&self, id: PatternId) -> Option<&StringPattern> {
        self.strings.get(&id)
    }

    /// Span pattern ids in creation order.
    pub fn span_pattern_ids(&self) -> &[PatternId] {
        &self.span_order
    }

    /// Live string templates of one attribute.
    pub fn live_templates(&self, key: &str) -> usize {
        self.string_parsers.get(key).map_or(0, |p| p.tree.len())
    }

    pub fn record(&self, id: PatternId) -> Result<SpanPatternRecord, SpanParserError> {
        let pattern = self.spans.get(&id).ok_or(SpanParserError::UnknownPattern(id))?;
        let attrs = pattern
            .attrs
            .iter()
            .map(|(key, p)| match p {
                AttrPattern::Str(sid) => AttrRecord::Str {
                    key: key.clone(),
                    pattern: *sid,
                    template: self.strings[sid].template.clone(),
                },
                AttrPattern::Num(bucket) => AttrRecord::Num {
                    key: key.clone(),
                    bucket: *bucket,
                },
            })
            .collect();
        Ok(SpanPatternRecord {
            id,
            operation: pattern.operation.clone(),
            alpha: self.config.alpha,
            attrs,
        })
    }

    /// Rebuilds the span a set of parameters came from.
    pub fn reconstruct(&self, params: &SpanParams, trace_id: &str, agent_id: &str) -> Result<Span, SpanParserError> {
        let record = self.record(params.pattern_id)?;
        Ok(Span {
            trace_id: trace_id.to_owned(),
            span_id: params.span_id.clone(),
            parent_span_id: params.parent_span_id.clone(),
            operation: record.operation.clone(),
            agent_id: agent_id.to_owned(),
            metadata: params.metadata.clone(),
            attributes: record.apply(&params.params)?,
        })
    }

    /// Line-oriented dictionary: one JSON span-pattern record per line.
    pub fn export_dictionary(&self) -> String {
        let mut out = String::new();
        for id in &self.span_order {
            if let Ok(r) = self.record(*id) {
                out.push_str(&serde_json::to_string(&r).unwrap_or_default());
                out.push('\n');
            }
        }
        out
    }
}
