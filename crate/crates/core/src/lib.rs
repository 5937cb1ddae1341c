//! Commonality + variability tracing pipeline.
//!
//! Spans are split into shared patterns and per-span parameters on the node
//! that produced them. Patterns and Bloom filters of trace ids are kept for
//! every trace; parameters only for sampled traces. The backend answers any
//! trace id with an exact reconstruction (sampled) or an approximate one
//! (unsampled).

pub mod agent;
pub mod backend;
pub mod collector;
pub mod config;
pub mod ids;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod span_parser;
pub mod token;
pub mod trace_parser;
pub mod wire;
pub mod workload;

pub use ids::PatternId;
pub use model::{AttributeValue, IngestLine, ModelError, Span, TraceMetadata};
