//! Pattern library entries and their self-contained dictionary form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::numeric::{self, NumericBucket, NumericParam};
use super::template::Template;
use super::SpanParserError;
use crate::ids::PatternId;
use crate::model::AttributeValue;
use crate::token::Token;

/// Pattern chosen for one attribute of a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttrPattern {
    #[serde(rename = "s")]
    Str(PatternId),
    #[serde(rename = "n")]
    Num(NumericBucket),
}

#[derive(Debug, Clone)]
pub struct StringPattern {
    pub id: PatternId,
    pub key: String,
    pub template: Template,
    pub origin_cluster_size: u64,
    /// First member of the originating cluster.
    pub representative: Vec<Token>,
}

impl StringPattern {
    pub fn id_for(key: &str, template: &Template) -> PatternId {
        PatternId::digest("string", &[key.as_bytes(), &template.canonical_bytes()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanPattern {
    pub id: PatternId,
    pub operation: String,
    pub attrs: Vec<(String, AttrPattern)>,
}

impl SpanPattern {
    pub fn new(operation: &str, attrs: Vec<(String, AttrPattern)>) -> SpanPattern {
        let encoded = serde_json::to_vec(&attrs).unwrap_or_default();
        SpanPattern {
            id: PatternId::digest("span", &[operation.as_bytes(), &encoded]),
            operation: operation.to_owned(),
            attrs,
        }
    }
}

/// One variable slot of a span.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Str(String),
    Num(NumericParam),
}

/// Variable part of one span: ids, metadata and the attribute parameters in
/// pattern order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanParams {
    pub span_id: String,
    pub parent_span_id: Option<String>,
    pub pattern_id: PatternId,
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<Param>,
}

/// Span pattern with its string templates inlined; all a backend needs to
/// render or rebuild spans of that pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPatternRecord {
    pub id: PatternId,
    pub operation: String,
    pub alpha: f64,
    pub attrs: Vec<AttrRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AttrRecord {
    #[serde(rename = "str")]
    Str {
        key: String,
        pattern: PatternId,
        template: Template,
    },
    #[serde(rename = "num")]
    Num { key: String, bucket: NumericBucket },
}

impl AttrRecord {
    pub fn key(&self) -> &str {
        match self {
            AttrRecord::Str { key, .. } | AttrRecord::Num { key, .. } => key,
        }
    }

    fn slots(&self) -> usize {
        match self {
            AttrRecord::Str { template, .. } => template.wildcard_count(),
            AttrRecord::Num { .. } => 1,
        }
    }
}

impl SpanPatternRecord {
    /// Number of parameters a span of this pattern carries.
    pub fn slot_count(&self) -> usize {
        self.attrs.iter().map(AttrRecord::slots).sum()
    }

    /// Rebuilds attribute values from parameters.
    pub fn apply(&self, params: &[Param]) -> Result<Vec<(String, AttributeValue)>, SpanParserError> {
        if params.len() != self.slot_count() {
            return Err(SpanParserError::ParamMismatch {
                pattern: self.id,
                detail: format!("expected {} params, got {}", self.slot_count(), params.len()),
            });
        }
        let mut rest = params;
        let mut out = Vec::with_capacity(self.attrs.len());
        for attr in &self.attrs {
            let (mine, tail) = rest.split_at(attr.slots());
            rest = tail;
            let value = match attr {
                AttrRecord::Str { template, .. } => {
                    let mut strings = Vec::with_capacity(mine.len());
                    for p in mine {
                        match p {
                            Param::Str(s) => strings.push(s.clone()),
                            Param::Num(_) => return Err(self.kind_error(attr.key())),
                        }
                    }
                    let text = template.render(&strings).map_err(|e| SpanParserError::ParamMismatch {
                        pattern: self.id,
                        detail: e.to_string(),
                    })?;
                    AttributeValue::Str(text)
                }
                AttrRecord::Num { bucket, .. } => match mine {
                    [Param::Num(p)] => AttributeValue::Num(numeric::decode(*bucket, *p, self.alpha)),
                    _ => return Err(self.kind_error(attr.key())),
                },
            };
            out.push((attr.key().to_owned(), value));
        }
        Ok(out)
    }

    fn kind_error(&self, key: &str) -> SpanParserError {
        SpanParserError::ParamMismatch {
            pattern: self.id,
            detail: format!("parameter kind mismatch for {key}"),
        }
    }

    /// `key=value` pairs with variables masked and numbers shown as buckets.
    pub fn masked_attributes(&self) -> Vec<(String, String)> {
        self.attrs
            .iter()
            .map(|a| match a {
                AttrRecord::Str { key, template, .. } => (key.clone(), template.masked()),
                AttrRecord::Num { key, bucket } => (key.clone(), bucket.render(self.alpha)),
            })
            .collect()
    }
}
