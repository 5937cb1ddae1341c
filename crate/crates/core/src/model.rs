//! Trace data model and the line-oriented ingest format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"trace_id":"t1","span_id":"s1","parent_span_id":null,"agent_id":"a0",
//!  "operation":"GET /","metadata":{"service":"web"},"attributes":{"http.url":"/","code":200}}
//! ```
//!
//! Attribute values are quoted strings or bare numbers. A line of the form
//! `{"end_of_trace":"t1"}` (optionally with `"agent_id"`) closes the trace's
//! sub-traces on the named agent, or on every agent when no agent is given.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

/// Metadata keys kept outside the attribute parser. Anything else found in a
/// record's `metadata` object is treated as a string attribute.
pub const METADATA_KEYS: [&str; 4] = ["service", "start_ns", "duration_ns", "status_code"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("duplicate attribute key {0:?}")]
    DuplicateAttributeKey(String),
}

#[derive(Debug, Clone)]
pub enum AttributeValue {
    Str(String),
    Num(f64),
}

impl AttributeValue {
    pub fn is_numeric(&self) -> bool {
        matches!(self, AttributeValue::Num(_))
    }
}

// Bitwise for numbers: reconstruction must be exact, including the sign of zero.
impl PartialEq for AttributeValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AttributeValue::Str(a), AttributeValue::Str(b)) => a == b,
            (AttributeValue::Num(a), AttributeValue::Num(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Str(s) => f.write_str(s),
            AttributeValue::Num(n) => f.write_str(&format_number(*n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub trace_id: String,
    pub span_id: String,
    pub parent_span_id: Option<String>,
    pub operation: String,
    pub agent_id: String,
    pub metadata: BTreeMap<String, String>,
    pub attributes: Vec<(String, AttributeValue)>,
}

impl Span {
    pub fn attribute(&self, key: &str) -> Option<&AttributeValue> {
        self.attributes.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn trace_metadata(&self) -> TraceMetadata {
        TraceMetadata {
            trace_id: self.trace_id.clone(),
            start_ns: self.metadata.get("start_ns").and_then(|s| s.parse().ok()),
            entry_service: self.metadata.get("service").cloned(),
        }
    }

    /// Canonical ingest line (no trailing newline).
    pub fn to_line(&self) -> String {
        let mut out = String::with_capacity(256);
        out.push_str("{\"trace_id\":");
        push_json_str(&mut out, &self.trace_id);
        out.push_str(",\"span_id\":");
        push_json_str(&mut out, &self.span_id);
        out.push_str(",\"parent_span_id\":");
        match &self.parent_span_id {
            Some(p) => push_json_str(&mut out, p),
            None => out.push_str("null"),
        }
        out.push_str(",\"agent_id\":");
        push_json_str(&mut out, &self.agent_id);
        out.push_str(",\"operation\":");
        push_json_str(&mut out, &self.operation);
        out.push_str(",\"metadata\":{");
        for (i, (k, v)) in self.metadata.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_json_str(&mut out, k);
            out.push(':');
            push_json_str(&mut out, v);
        }
        out.push_str("},\"attributes\":{");
        for (i, (k, v)) in self.attributes.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_json_str(&mut out, k);
            out.push(':');
            match v {
                AttributeValue::Str(s) => push_json_str(&mut out, s),
                AttributeValue::Num(n) => out.push_str(&format_number(*n)),
            }
        }
        out.push_str("}}");
        out
    }
}

/// Per-trace metadata mounted on topology patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMetadata {
    pub trace_id: String,
    pub start_ns: Option<u64>,
    pub entry_service: Option<String>,
}

impl TraceMetadata {
    pub fn new(trace_id: impl Into<String>) -> Self {
        TraceMetadata {
            trace_id: trace_id.into(),
            start_ns: None,
            entry_service: None,
        }
    }
}

fn push_json_str(out: &mut String, s: &str) {
    // serde_json string escaping never fails for &str
    out.push_str(&serde_json::to_string(s).unwrap_or_default());
}

/// Integers below 1e15 print without a fraction; everything else uses the
/// shortest round-tripping representation.
pub fn format_number(n: f64) -> String {
    let negative_zero = n == 0.0 && n.is_sign_negative();
    if n.fract() == 0.0 && n.abs() < 1e15 && !negative_zero {
        format!("{}", n as i64)
    } else {
        serde_json::to_string(&n).unwrap_or_else(|_| "null".into())
    }
}

/// A value as it appears in the ingest line, before validation.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Str(String),
    Num(f64),
}

struct RawValueVisitor;

impl<'de> Visitor<'de> for RawValueVisitor {
    type Value = RawValue;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a string or a number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<RawValue, E> {
        Ok(RawValue::Str(v.to_owned()))
    }

    fn visit_string<E: de::Error>(self, v: String) -> Result<RawValue, E> {
        Ok(RawValue::Str(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<RawValue, E> {
        Ok(RawValue::Num(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<RawValue, E> {
        Ok(RawValue::Num(v as f64))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<RawValue, E> {
        Ok(RawValue::Num(v))
    }
}

impl<'de> Deserialize<'de> for RawValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(RawValueVisitor)
    }
}

/// Ordered key/value list that keeps duplicate keys so validation can reject them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairList(pub Vec<(String, RawValue)>);

impl<'de> Deserialize<'de> for PairList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PairList;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<PairList, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, RawValue>()? {
                    out.push((k, v));
                }
                Ok(PairList(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Decoded but unvalidated ingest line.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawRecord {
    pub trace_id: Option<String>,
    pub span_id: Option<String>,
    #[serde(default)]
    pub parent_span_id: Option<String>,
    pub agent_id: Option<String>,
    pub operation: Option<String>,
    #[serde(default)]
    pub metadata: PairList,
    #[serde(default)]
    pub attributes: PairList,
    #[serde(default)]
    pub end_of_trace: Option<String>,
}

/// One parsed ingest line.
#[derive(Debug, Clone, PartialEq)]
pub enum IngestLine {
    Span(Span),
    EndOfTrace {
        trace_id: String,
        agent_id: Option<String>,
    },
}

impl IngestLine {
    pub fn to_line(&self) -> String {
        match self {
            IngestLine::Span(s) => s.to_line(),
            IngestLine::EndOfTrace { trace_id, agent_id } => {
                let mut out = String::from("{\"end_of_trace\":");
                push_json_str(&mut out, trace_id);
                if let Some(a) = agent_id {
                    out.push_str(",\"agent_id\":");
                    push_json_str(&mut out, a);
                }
                out.push('}');
                out
            }
        }
    }
}

pub fn parse_line(line: &str) -> Result<IngestLine, ModelError> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| ModelError::MalformedRecord(e.to_string()))?;
    if let Some(trace_id) = raw.end_of_trace {
        if trace_id.is_empty() {
            return Err(ModelError::MalformedRecord("empty end_of_trace id".into()));
        }
        return Ok(IngestLine::EndOfTrace {
            trace_id,
            agent_id: raw.agent_id,
        });
    }
    validate_span(raw).map(IngestLine::Span)
}

fn required(field: Option<String>, name: &str) -> Result<String, ModelError> {
    match field {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(ModelError::MalformedRecord(format!("missing {name}"))),
    }
}

/// Checks span invariants and moves non-predefined metadata into attributes.
pub fn validate_span(raw: RawRecord) -> Result<Span, ModelError> {
    let trace_id = required(raw.trace_id, "trace_id")?;
    let span_id = required(raw.span_id, "span_id")?;
    let agent_id = required(raw.agent_id, "agent_id")?;
    let operation = raw.operation.unwrap_or_default();
    if raw.parent_span_id.as_deref() == Some(span_id.as_str()) {
        return Err(ModelError::MalformedRecord(format!(
            "span {span_id} is its own parent"
        )));
    }
    let parent_span_id = raw.parent_span_id.filter(|p| !p.is_empty());

    let mut attributes: Vec<(String, AttributeValue)> = Vec::with_capacity(raw.attributes.0.len());
    for (k, v) in raw.attributes.0 {
        if attributes.iter().any(|(seen, _)| *seen == k) {
            return Err(ModelError::DuplicateAttributeKey(k));
        }
        let value = match v {
            RawValue::Str(s) => AttributeValue::Str(s),
            RawValue::Num(n) if n.is_finite() => AttributeValue::Num(n),
            RawValue::Num(_) => {
                return Err(ModelError::MalformedRecord(format!("non-finite value for {k}")))
            }
        };
        attributes.push((k, value));
    }

    let mut metadata = BTreeMap::new();
    for (k, v) in raw.metadata.0 {
        let text = match v {
            RawValue::Str(s) => s,
            RawValue::Num(n) => format_number(n),
        };
        if METADATA_KEYS.contains(&k.as_str()) {
            if metadata.insert(k.clone(), text).is_some() {
                return Err(ModelError::MalformedRecord(format!("duplicate metadata key {k}")));
            }
        } else {
            if attributes.iter().any(|(seen, _)| *seen == k) {
                return Err(ModelError::DuplicateAttributeKey(k));
            }
            attributes.push((k, AttributeValue::Str(text)));
        }
    }

    Ok(Span {
        trace_id,
        span_id,
        parent_span_id,
        operation,
        agent_id,
        metadata,
        attributes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(parent: &str, attrs: &str) -> String {
        format!(
            r#"{{"trace_id":"t1","span_id":"s1","parent_span_id":{parent},"agent_id":"a0","operation":"op","metadata":{{"service":"web","start_ns":"10"}},"attributes":{attrs}}}"#
        )
    }

    #[test]
    fn complete_record_passes_through() {
        let l = line("null", r#"{"sql":"SELECT 1","rows":3,"ok":"yes"}"#);
        let IngestLine::Span(span) = parse_line(&l).unwrap() else {
            panic!("expected span")
        };
        assert_eq!(span.attributes.len(), 3);
        assert_eq!(span.attribute("rows"), Some(&AttributeValue::Num(3.0)));
        assert_eq!(span.parent_span_id, None);
        assert_eq!(span.metadata["service"], "web");
    }

    #[test]
    fn self_parent_is_malformed() {
        let l = line("\"s1\"", "{}");
        assert!(matches!(parse_line(&l), Err(ModelError::MalformedRecord(_))));
    }

    #[test]
    fn duplicate_attribute_key() {
        let l = line("null", r#"{"sql":"a","sql":"b"}"#);
        assert_eq!(
            parse_line(&l),
            Err(ModelError::DuplicateAttributeKey("sql".into()))
        );
    }

    #[test]
    fn missing_ids_are_malformed() {
        let l = r#"{"span_id":"s","agent_id":"a"}"#;
        assert!(matches!(parse_line(l), Err(ModelError::MalformedRecord(_))));
        let l = r#"{"trace_id":"t","span_id":"","agent_id":"a"}"#;
        assert!(matches!(parse_line(l), Err(ModelError::MalformedRecord(_))));
        assert!(matches!(parse_line("not json"), Err(ModelError::MalformedRecord(_))));
    }

    #[test]
    fn bool_attribute_rejected() {
        let l = line("null", r#"{"flag":true}"#);
        assert!(matches!(parse_line(&l), Err(ModelError::MalformedRecord(_))));
    }

    #[test]
    fn extra_metadata_becomes_attribute() {
        let l = r#"{"trace_id":"t","span_id":"s","agent_id":"a","operation":"o","metadata":{"host":"h1","service":"x"},"attributes":{}}"#;
        let IngestLine::Span(span) = parse_line(l).unwrap() else {
            panic!()
        };
        assert_eq!(span.attribute("host"), Some(&AttributeValue::Str("h1".into())));
        assert!(!span.metadata.contains_key("host"));
    }

    #[test]
    fn end_marker() {
        assert_eq!(
            parse_line(r#"{"end_of_trace":"t9"}"#).unwrap(),
            IngestLine::EndOfTrace {
                trace_id: "t9".into(),
                agent_id: None
            }
        );
        let m = IngestLine::EndOfTrace {
            trace_id: "t".into(),
            agent_id: Some("a1".into()),
        };
        assert_eq!(parse_line(&m.to_line()).unwrap(), m);
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(200.0), "200");
        assert_eq!(format_number(-3.0), "-3");
        assert_eq!(format_number(0.5), "0.5");
        assert_eq!(format_number(-0.0), "-0.0");
        assert_eq!(format_number(1e300).parse::<f64>().unwrap(), 1e300);
    }

    fn arb_span() -> impl Strategy<Value = Span> {
        let key = "[a-z.]{1,8}";
        let value = prop_oneof![
            "\\PC{0,20}".prop_map(AttributeValue::Str),
            (-1e12f64..1e12).prop_map(AttributeValue::Num),
            (-1000i64..1000).prop_map(|n| AttributeValue::Num(n as f64)),
        ];
        (
            "[a-f0-9]{1,16}",
            "[a-f0-9]{1,16}",
            proptest::option::of("[a-f0-9]{1,16}"),
            "\\PC{0,12}",
            proptest::collection::btree_map(key, value, 0..5),
            proptest::collection::btree_map(
                prop_oneof![Just("service"), Just("start_ns"), Just("status_code")],
                "[ -~]{0,10}",
                0..3,
            ),
        )
            .prop_filter("self parent", |(_, s, p, ..)| p.as_ref() != Some(s))
            .prop_map(|(t, s, p, op, attrs, md)| Span {
                trace_id: t,
                span_id: s,
                parent_span_id: p,
                operation: op,
                agent_id: "a0".into(),
                metadata: md.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                attributes: attrs.into_iter().collect(),
            })
    }

    proptest! {
        #[test]
        fn serialize_then_validate_is_identity(span in arb_span()) {
            let line = span.to_line();
            let back = parse_line(&line).unwrap();
            prop_assert_eq!(back, IngestLine::Span(span.clone()));
            prop_assert_eq!(IngestLine::Span(span).to_line(), line);
        }
    }
}
