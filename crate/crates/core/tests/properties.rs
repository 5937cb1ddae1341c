//! Property tests for the module invariants.

use std::collections::{BTreeMap, VecDeque};

use proptest::prelude::*;

use mint_core::agent::ParamBlock;
use mint_core::backend::TraceStore;
use mint_core::collector::{Envelope, PatternRecord};
use mint_core::sampler::{BlockView, EdgeCaseSampler, Reason, Sampler, SamplerConfig, SymptomSampler};
use mint_core::span_parser::{Param, PrefixTree, SpanParser, SpanParserConfig, Template};
use mint_core::token::tokenize_with_gaps;
use mint_core::trace_parser::{
    assemble_subtrace, encode_topology, BloomKey, SubTraceSpan, TraceParser, TraceParserConfig,
};
use mint_core::{AttributeValue, PatternId, Span, TraceMetadata};

fn arb_value() -> impl Strategy<Value = AttributeValue> {
    prop_oneof![
        "[a-z0-9 =(),:/_.-]{0,30}".prop_map(AttributeValue::Str),
        proptest::num::f64::NORMAL.prop_map(AttributeValue::Num),
        (-1000i64..100_000).prop_map(|n| AttributeValue::Num(n as f64)),
        Just(AttributeValue::Num(0.0)),
    ]
}

fn arb_span() -> impl Strategy<Value = Span> {
    (
        "[a-f0-9]{16}",
        proptest::option::of("[a-f0-9]{16}"),
        prop_oneof![Just("GET /a"), Just("db.query"), Just("rpc")],
        proptest::collection::btree_map("[a-c]{1,2}", arb_value(), 0..5),
        "[0-9]{1,19}",
    )
        .prop_map(|(s, p, op, attrs, start)| Span {
            trace_id: "t".into(),
            span_id: s,
            parent_span_id: p,
            operation: op.into(),
            agent_id: "a0".into(),
            metadata: BTreeMap::from([("start_ns".to_string(), start)]),
            attributes: attrs.into_iter().collect(),
        })
}

/// Spans drawn from a fixed set of templates with random variables.
fn templated(kind: u8, n: u32) -> Span {
    let (op, attrs) = match kind % 3 {
        0 => ("db.insert", vec![("db.statement", AttributeValue::Str(format!("INSERT INTO city VALUES ( {n} , 'x' ) ;")))]),
        1 => ("GET /item", vec![("http.url", AttributeValue::Str(format!("/api/v1/items/{n}/detail")))]),
        _ => ("cache.get", vec![("bytes", AttributeValue::Num(f64::from(n % 5 + 10)))]),
    };
    Span {
        trace_id: format!("t{n}"),
        span_id: format!("s{n}"),
        parent_span_id: None,
        operation: op.into(),
        agent_id: "a0".into(),
        metadata: BTreeMap::new(),
        attributes: attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn subtrace(spans: &[(usize, Option<usize>, u64)]) -> Vec<SubTraceSpan> {
    spans
        .iter()
        .map(|&(id, parent, pattern)| SubTraceSpan {
            span_id: format!("s{id}"),
            parent_span_id: parent.map(|p| format!("s{p}")),
            pattern_id: PatternId(pattern),
            operation: format!("op{pattern}"),
        })
        .collect()
}

/// Random tree: node i > 0 hangs under some j < i, or under a foreign span.
fn arb_tree() -> impl Strategy<Value = Vec<(usize, Option<usize>, u64)>> {
    (1usize..8).prop_flat_map(|n| {
        proptest::collection::vec((any::<prop::sample::Index>(), 0u64..3, prop::bool::weighted(0.15)), n).prop_map(|picks| {
            picks
                .into_iter()
                .enumerate()
                .map(|(i, (ix, pattern, foreign))| {
                    let parent = if i == 0 {
                        None
                    } else if foreign {
                        Some(100 + i)
                    } else {
                        Some(ix.index(i))
                    };
                    (i, parent, pattern)
                })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // pattern + params give back every attribute bit for bit
    #[test]
    fn span_parse_is_lossless(spans in proptest::collection::vec(arb_span(), 1..12), warm in 0usize..6) {
        let mut parser = SpanParser::new(SpanParserConfig::default());
        let warm = warm.min(spans.len());
        if warm > 0 {
            parser.warmup(&spans[..warm]).unwrap();
        }
        for s in &spans {
            let parsed = parser.parse(s);
            let back = parser.reconstruct(&parsed.params, &s.trace_id, &s.agent_id).unwrap();
            prop_assert_eq!(&back, s);
            let record = parser.record(parsed.params.pattern_id).unwrap();
            prop_assert_eq!(record.apply(&parsed.params.params).unwrap(), s.attributes.clone());
        }
    }

    // library size never shrinks and is constant once every template has
    // settled (string templates settle on their second member)
    #[test]
    fn span_library_plateaus(kinds in proptest::collection::vec(0u8..3, 30..120), seed in 0u32..1000) {
        let mut parser = SpanParser::new(SpanParserConfig::default());
        let mut sizes = Vec::new();
        let mut seen = [0usize; 3];
        let mut settled = None;
        for (i, &k) in kinds.iter().enumerate() {
            parser.parse(&templated(k, seed * 1000 + i as u32));
            sizes.push(parser.span_pattern_count());
            seen[k as usize] += 1;
            if settled.is_none() && seen[0] >= 2 && seen[1] >= 2 && seen[2] >= 1 {
                settled = Some(i);
            }
        }
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        if let Some(i) = settled {
            prop_assert!(sizes[i..].iter().all(|s| *s == sizes[i]), "sizes {:?}", sizes);
        }
    }

    // every inserted template is found again, whatever the insertion order
    #[test]
    fn prefix_tree_complete_and_order_free(
        words in proptest::collection::vec("[a-d]{1,2}( [a-d0-9]{1,2}){0,4}", 1..8),
        rotate in 0usize..8,
    ) {
        // one id per distinct template; neighbours are merged into wildcard templates
        let mut templates: Vec<Template> = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let t = match words.get(i + 1) {
                Some(next) if i % 2 == 1 => Template::extract(&[tokenize_with_gaps(w), tokenize_with_gaps(next)]).unwrap(),
                _ => Template::literal(&tokenize_with_gaps(w)),
            };
            if !templates.contains(&t) {
                templates.push(t);
            }
        }
        let mut a = PrefixTree::new();
        let mut b = PrefixTree::new();
        let n = templates.len();
        for (i, t) in templates.iter().enumerate() {
            a.insert(t, PatternId(i as u64));
        }
        for k in 0..n {
            let i = (k + rotate) % n;
            b.insert(&templates[i], PatternId(i as u64));
        }
        for w in &words {
            let toks = tokenize_with_gaps(w);
            let found = a.find(&toks);
            prop_assert!(found.is_some());
            prop_assert_eq!(found.map(|f| f.0), b.find(&toks).map(|f| f.0));
        }
        for (i, t) in templates.iter().enumerate() {
            if t.wildcard_count() == 0 {
                let toks: Vec<_> = tokenize_with_gaps(&t.masked());
                prop_assert_eq!(a.find(&toks).map(|f| f.0), Some(PatternId(i as u64)));
            }
        }
    }

    // listing order and span ids do not change the encoding
    #[test]
    fn topology_encoding_is_canonical(tree in arb_tree(), shuffle in any::<u64>()) {
        let spans = subtrace(&tree);
        let a = assemble_subtrace("t", "a0", spans.clone()).unwrap();
        let mut shuffled = spans;
        let len = shuffled.len();
        for i in (1..len).rev() {
            let j = (shuffle.rotate_left(i as u32) as usize) % (i + 1);
            shuffled.swap(i, j);
        }
        for s in &mut shuffled {
            s.span_id = format!("x{}", s.span_id);
            if let Some(p) = &mut s.parent_span_id {
                *p = format!("x{p}");
            }
        }
        let b = assemble_subtrace("t", "a0", shuffled).unwrap();
        prop_assert_eq!(encode_topology(&a), encode_topology(&b));
    }

    // every mounted id tests positive in some filter of its topology
    #[test]
    fn bloom_no_miss(ids in proptest::collection::vec("[a-z0-9]{1,12}", 1..400), bytes in 8usize..64) {
        let mut tp = TraceParser::new(TraceParserConfig { bloom_capacity_bytes: bytes, bloom_fpp: 0.01 });
        let st = assemble_subtrace("t", "a0", subtrace(&[(0, None, 1)])).unwrap();
        let (topo, _) = tp.process_subtrace(&st);
        let mut sealed = Vec::new();
        for id in &ids {
            sealed.extend(tp.mount_metadata(topo, &TraceMetadata::new(id.clone())).unwrap());
        }
        let live: Vec<bool> = ids.iter().map(|id| tp.live_contains(topo, id)).collect();
        sealed.extend(tp.seal_all());
        for (id, live) in ids.iter().zip(live) {
            let k = BloomKey::of(id);
            prop_assert!(live || sealed.iter().any(|b| b.filter.contains(k)));
            prop_assert!(sealed.iter().any(|b| b.filter.contains(k)));
        }
        prop_assert!(sealed.iter().all(|b| b.filter.inserted() <= tp.bloom_capacity()));
    }

    // the inverse-frequency policy never favours the more frequent pattern
    #[test]
    fn edge_case_probability_monotone(f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, c in 0.0f64..0.5) {
        let cfg = SamplerConfig { edge_case_c: c, ..Default::default() };
        let s = EdgeCaseSampler::new(&cfg, "a0");
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(s.probability(lo) >= s.probability(hi));
    }

    #[test]
    fn edge_case_deterministic(freqs in proptest::collection::vec(0.0f64..1.0, 1..200), seed in any::<u64>()) {
        let cfg = SamplerConfig { rng_seed: seed, ..Default::default() };
        let mut a = EdgeCaseSampler::new(&cfg, "a1");
        let mut b = EdgeCaseSampler::new(&cfg, "a1");
        for f in freqs {
            prop_assert_eq!(a.draw(f), b.draw(f));
        }
    }

    // every value above the warmed nearest-rank threshold is flagged
    #[test]
    fn symptom_flags_every_outlier(values in proptest::collection::vec(1u32..200, 1..300)) {
        let cfg = SamplerConfig { window: 40, min_window: 10, quantile: 0.9, abnormal_words: vec![], ..Default::default() };
        let mut sampler = SymptomSampler::new(&cfg);
        let mut parser = SpanParser::new(SpanParserConfig::default());
        let mut windows: BTreeMap<PatternId, VecDeque<f64>> = BTreeMap::new();
        for (i, v) in values.iter().enumerate() {
            let span = Span {
                trace_id: format!("t{i}"),
                span_id: "s".into(),
                parent_span_id: None,
                operation: "op".into(),
                agent_id: "a0".into(),
                metadata: BTreeMap::new(),
                attributes: vec![("n".into(), AttributeValue::Num(f64::from(*v)))],
            };
            let params = parser.parse(&span).params;
            let Param::Num(p) = params.params[0] else { unreachable!() };
            let x = p.magnitude();
            let pattern = params.pattern_id;
            let block = ParamBlock::new(span.trace_id.clone(), "a0".into(), vec![params], i as u64);
            let view = BlockView { block: &block, topo_id: PatternId(0), topo_match_count: 1, total_matches: 1, parser: &parser };
            let d = sampler.decide(&view);

            let w = windows.entry(pattern).or_default();
            let expect = if w.len() >= cfg.min_window {
                let mut sorted: Vec<f64> = w.iter().copied().collect();
                sorted.sort_by(f64::total_cmp);
                let rank = (cfg.quantile * sorted.len() as f64).ceil() as usize;
                x > sorted[rank.max(1) - 1]
            } else {
                false
            };
            prop_assert_eq!(d.sampled, expect);
            prop_assert_eq!(d.reasons.iter().any(|r| matches!(r, Reason::Outlier { .. })), expect);
            w.push_back(x);
            if w.len() > cfg.window {
                w.pop_front();
            }
        }
    }

    // a pattern delta applied twice leaves the store as after the first time
    #[test]
    fn pattern_upload_is_idempotent(kinds in proptest::collection::vec(0u8..3, 1..20)) {
        let mut parser = SpanParser::new(SpanParserConfig::default());
        for (i, k) in kinds.iter().enumerate() {
            parser.parse(&templated(*k, i as u32));
        }
        let records: Vec<PatternRecord> = parser
            .span_pattern_ids()
            .iter()
            .map(|id| PatternRecord::Span(parser.record(*id).unwrap()))
            .collect();
        let env = Envelope::pattern_delta("a0", 0, &records);
        let mut store = TraceStore::new();
        store.apply(&env).unwrap();
        let once = (store.span_pattern_count(), store.storage_bytes());
        store.apply(&env).unwrap();
        prop_assert_eq!((store.span_pattern_count(), store.storage_bytes()), once);
    }
}
