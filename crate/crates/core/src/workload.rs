//! Synthetic four-service workload with known pattern counts.
//!
//! Services (one per agent): frontend, catalog, checkout, cart. Ten span
//! templates combine into eight per-agent sub-trace shapes:
//!
//! ```text
//! A  GET /product    -> catalog.get -> db.query
//! B  POST /checkout  -> checkout.place -> {db.insert, cart.get -> cart}
//! C  GET /product    (served from cache)
//! D  GET /product    -> catalog.get -> {db.query, db.query}
//! E  POST /checkout  -> checkout.place -> cart.get -> cart   (rare path)
//! ```
//!
//! Every string variable sits among enough fixed tokens that two values of
//! one template stay above the default similarity threshold, and every
//! numeric attribute stays inside one bucket at the default precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttributeValue, IngestLine, Span};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub traces: usize,
    /// Services are placed on agents round-robin.
    pub agents: usize,
    pub anomaly_rate: f64,
    pub rare_rate: f64,
    pub seed: u64,
    pub start_ns: u64,
    /// Quantize healthy span durations to this many levels (0: continuous).
    pub latency_levels: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            traces: 10_000,
            agents: 4,
            anomaly_rate: 0.0,
            rare_rate: 0.01,
            seed: 1,
            start_ns: 1_700_000_000_000_000_000,
            latency_levels: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (name, r) in [("anomaly_rate", self.anomaly_rate), ("rare_rate", self.rare_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(WorkloadError::InvalidSpec(format!("{name} {r} not in [0, 1]")));
            }
        }
        if self.agents == 0 {
            return Err(WorkloadError::InvalidSpec("agents must be >= 1".into()));
        }
        Ok(())
    }
}

pub const SERVICES: [&str; 4] = ["frontend", "catalog", "checkout", "cart"];
pub const SPAN_TEMPLATES: usize = 10;
pub const TOPO_TEMPLATES: usize = 8;
pub const NORMAL_STATUS: &str = "200 OK";
pub const ANOMALY_STATUS: &str = "502 Bad Gateway";

/// Per-trace ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTruth {
    pub trace_id: String,
    pub trace_type: char,
    pub anomaly: bool,
    /// Span template (1..=10) of every span, in stream order.
    pub span_templates: Vec<u8>,
    /// agent id -> span ids placed there.
    pub placement: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub lines: Vec<String>,
    pub truth: Vec<TraceTruth>,
}

impl Workload {
    pub fn sidecar(&self) -> String {
        let mut out = String::new();
        for t in &self.truth {
            out.push_str(&serde_json::to_string(t).expect("truth serializes"));
            out.push('\n');
        }
        out
    }
}

struct Vars {
    product: u32,
    user: u32,
    cart: u32,
    order: u32,
}

struct Node {
    template: u8,
    parent: Option<usize>,
}

fn shape(trace_type: char) -> Vec<Node> {
    let n = |template, parent| Node { template, parent };
    match trace_type {
        'A' => vec![n(1, None), n(3, Some(0)), n(5, Some(1)), n(6, Some(2))],
        'B' => vec![
            n(2, None),
            n(4, Some(0)),
            n(7, Some(1)),
            n(8, Some(2)),
            n(9, Some(2)),
            n(10, Some(4)),
        ],
        'C' => vec![n(1, None)],
        'D' => vec![n(1, None), n(3, Some(0)), n(5, Some(1)), n(6, Some(2)), n(6, Some(2))],
        _ => vec![n(2, None), n(4, Some(0)), n(7, Some(1)), n(9, Some(2)), n(10, Some(3))],
    }
}

/// Service index, operation and base duration of a span template.
fn template_info(t: u8) -> (usize, &'static str, u64) {
    match t {
        1 => (0, "GET /product", 40_000_000),
        2 => (0, "POST /checkout", 90_000_000),
        3 => (0, "catalog.get", 30_000_000),
        4 => (0, "checkout.place", 80_000_000),
        5 => (1, "catalog.get", 25_000_000),
        6 => (1, "db.query", 8_000_000),
        7 => (2, "checkout.place", 70_000_000),
        8 => (2, "db.insert", 12_000_000),
        9 => (2, "cart.get", 20_000_000),
        _ => (3, "cart.get", 3_000_000),
    }
}

fn s(v: impl Into<String>) -> AttributeValue {
    AttributeValue::Str(v.into())
}

fn attributes(t: u8, v: &Vars, rng: &mut ChaCha8Rng) -> Vec<(String, AttributeValue)> {
    let kv: Vec<(&str, AttributeValue)> = match t {
        1 => vec![
            ("span.kind", s("server")),
            ("http.method", s("GET")),
            ("http.url", s(format!("/api/v1/products/{}", v.product))),
            ("http.status_code", AttributeValue::Num(200.0)),
        ],
        2 => vec![
            ("span.kind", s("server")),
            ("http.method", s("POST")),
            ("http.url", s(format!("/api/v1/checkout?user={}&cart={}", v.user, v.cart))),
            ("http.status_code", AttributeValue::Num(200.0)),
        ],
        3 => vec![
            ("span.kind", s("client")),
            ("peer.service", s("catalog")),
            ("rpc.request", s(format!("product_id = {} locale = en_US currency = USD", v.product))),
        ],
        4 => vec![
            ("span.kind", s("client")),
            ("peer.service", s("checkout")),
            ("rpc.request", s(format!("user_id = {} cart_id = {} currency = USD mode = sync", v.user, v.cart))),
            ("order.items", AttributeValue::Num(rng.gen_range(4..=9) as f64)),
        ],
        5 => vec![
            ("span.kind", s("server")),
            ("rpc.method", s("/catalog.Catalog/GetProduct")),
            ("app.lookup", s(format!("product {} lookup in catalog v2", v.product))),
        ],
        6 => vec![
            ("span.kind", s("client")),
            ("db.system", s("postgresql")),
            ("db.statement", s(format!("SELECT * FROM products WHERE id = {}", v.product))),
            ("db.rows", AttributeValue::Num(rng.gen_range(2..=3) as f64)),
        ],
        7 => vec![
            ("span.kind", s("server")),
            ("rpc.method", s("/checkout.Checkout/PlaceOrder")),
            ("app.order", s(format!("order {} placed for user {} via web checkout service today", v.order, v.user))),
        ],
        8 => vec![
            ("span.kind", s("client")),
            ("db.system", s("postgresql")),
            ("db.statement", s(format!("INSERT INTO orders ( id , user ) VALUES ( {} , {} )", v.order, v.user))),
        ],
        9 => vec![
            ("span.kind", s("client")),
            ("peer.service", s("cart")),
            ("rpc.request", s(format!("user_id = {} include_items = true format = compact", v.user))),
        ],
        _ => vec![
            ("span.kind", s("server")),
            ("db.system", s("redis")),
            ("db.statement", s(format!("GET cache:cart:user:{}", v.user))),
        ],
    };
    kv.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

fn hex(rng: &mut ChaCha8Rng, bytes: usize) -> String {
    (0..bytes).map(|_| format!("{:02x}", rng.gen::<u8>())).collect()
}

fn pick_type(rng: &mut ChaCha8Rng, rare_rate: f64) -> char {
    if rng.gen::<f64>() < rare_rate {
        return 'E';
    }
    match rng.gen::<f64>() {
        x if x < 0.40 => 'A',
        x if x < 0.65 => 'B',
        x if x < 0.85 => 'C',
        _ => 'D',
    }
}

/// Deterministic trace-by-trace generator.
pub struct WorkloadIter {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    emitted: usize,
}

impl WorkloadIter {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        Ok(WorkloadIter {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            emitted: 0,
        })
    }

    pub fn agent_of(&self, service: usize) -> String {
        format!("a{}", service % self.spec.agents)
    }
}

impl Iterator for WorkloadIter {
    /// Ingest lines of one trace (spans then the end marker) and its truth.
    type Item = (Vec<String>, TraceTruth);

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted == self.spec.traces {
            return None;
        }
        let rng = &mut self.rng;
        let trace_type = pick_type(rng, self.spec.rare_rate);
        let anomaly = rng.gen::<f64>() < self.spec.anomaly_rate;
        let trace_id = hex(rng, 16);
        let vars = Vars {
            product: rng.gen_range(1..100_000),
            user: rng.gen_range(1..100_000),
            cart: rng.gen_range(1..100_000),
            order: rng.gen_range(100_000..1_000_000),
        };
        let nodes = shape(trace_type);
        let failing = anomaly.then(|| rng.gen_range(0..nodes.len()));
        let trace_start = self.spec.start_ns + self.emitted as u64 * 1_000_000 + rng.gen_range(0..500_000);

        let mut ids: Vec<String> = Vec::with_capacity(nodes.len());
        let mut starts: Vec<u64> = Vec::with_capacity(nodes.len());
        let mut lines = Vec::with_capacity(nodes.len() + 1);
        let mut truth = TraceTruth {
            trace_id: trace_id.clone(),
            trace_type,
            anomaly,
            span_templates: Vec::with_capacity(nodes.len()),
            placement: BTreeMap::new(),
        };
        for (i, node) in nodes.iter().enumerate() {
            let (service, operation, base) = template_info(node.template);
            let span_id = hex(rng, 8);
            let start = match node.parent {
                None => trace_start,
                Some(p) => starts[p] + rng.gen_range(100_000..2_000_000),
            };
            let levels = u64::from(self.spec.latency_levels);
            let mut duration = match levels {
                0 => base / 2 + rng.gen_range(0..base),
                n => base / 2 + base * rng.gen_range(0..n) / n,
            };
            let failed = failing == Some(i);
            if failed {
                duration *= 20;
            }
            let status = if failed || (failing.is_some() && i == 0) { ANOMALY_STATUS } else { NORMAL_STATUS };
            let agent_id = format!("a{}", service % self.spec.agents);
            let span = Span {
                trace_id: trace_id.clone(),
                span_id: span_id.clone(),
                parent_span_id: node.parent.map(|p| ids[p].clone()),
                operation: operation.to_owned(),
                agent_id: agent_id.clone(),
                metadata: [
                    ("service".to_string(), SERVICES[service].to_string()),
                    ("start_ns".to_string(), start.to_string()),
                    ("duration_ns".to_string(), duration.to_string()),
                    ("status_code".to_string(), status.to_string()),
                ]
                .into(),
                attributes: attributes(node.template, &vars, rng),
            };
            lines.push(span.to_line());
            truth.span_templates.push(node.template);
            truth.placement.entry(agent_id).or_default().push(span_id.clone());
            ids.push(span_id);
            starts.push(start);
        }
        lines.push(
            IngestLine::EndOfTrace {
                trace_id,
                agent_id: None,
            }
            .to_line(),
        );
        self.emitted += 1;
        Some((lines, truth))
    }
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    let mut w = Workload::default();
    for (lines, truth) in WorkloadIter::new(spec.clone())? {
        w.lines.extend(lines);
        w.truth.push(truth);
    }
    Ok(w)
}
