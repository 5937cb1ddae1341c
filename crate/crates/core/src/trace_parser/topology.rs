//! Sub-trace assembly and canonical topology encoding.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::TraceParserError;
use crate::ids::PatternId;

/// One span as the trace parser sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTraceSpan {
    pub span_id: String,
    pub parent_span_id: Option<String>,
    pub pattern_id: PatternId,
    pub operation: String,
}

/// How a sub-trace root attaches to the rest of its trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RootKind {
    /// No parent at all: the trace starts here.
    #[serde(rename = "origin")]
    Origin,
    /// Parent lives on another node.
    #[serde(rename = "remote")]
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTrace {
    pub trace_id: String,
    pub agent_id: String,
    pub spans: Vec<SubTraceSpan>,
    /// Indices into `spans`.
    pub roots: Vec<(usize, RootKind)>,
    children: Vec<Vec<usize>>,
}

impl SubTrace {
    pub fn root_span_ids(&self) -> Vec<&str> {
        self.roots.iter().map(|&(i, _)| self.spans[i].span_id.as_str()).collect()
    }

    pub fn children_of(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Operations of roots whose parent is on another node.
    pub fn entry_operations(&self) -> Vec<&str> {
        let mut ops: Vec<&str> = self
            .roots
            .iter()
            .filter(|r| r.1 == RootKind::Remote)
            .map(|&(i, _)| self.spans[i].operation.as_str())
            .collect();
        ops.sort_unstable();
        ops
    }

    /// Operations of leaves below a root: the only spans that can call out.
    pub fn exit_operations(&self) -> Vec<&str> {
        let roots: HashSet<usize> = self.roots.iter().map(|r| r.0).collect();
        let mut ops: Vec<&str> = (0..self.spans.len())
            .filter(|i| self.children[*i].is_empty() && !roots.contains(i))
            .map(|i| self.spans[i].operation.as_str())
            .collect();
        ops.sort_unstable();
        ops
    }
}

/// Links spans of one trace on one node into a forest.
pub fn assemble_subtrace(
    trace_id: &str,
    agent_id: &str,
    spans: Vec<SubTraceSpan>,
) -> Result<SubTrace, TraceParserError> {
    if spans.is_empty() {
        return Err(TraceParserError::EmptySubTrace);
    }
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        if index.insert(s.span_id.as_str(), i).is_some() {
            return Err(TraceParserError::DuplicateSpanId(s.span_id.clone()));
        }
    }
    let mut children = vec![Vec::new(); spans.len()];
    let mut roots = Vec::new();
    for (i, s) in spans.iter().enumerate() {
        match s.parent_span_id.as_deref() {
            None => roots.push((i, RootKind::Origin)),
            Some(p) if p == s.span_id => {
                return Err(TraceParserError::CyclicParentLinks(s.span_id.clone()))
            }
            Some(p) => match index.get(p) {
                Some(&pi) => children[pi].push(i),
                None => roots.push((i, RootKind::Remote)),
            },
        }
    }
    // every span must be reachable from a root, otherwise a cycle exists
    let mut seen = vec![false; spans.len()];
    let mut stack: Vec<usize> = roots.iter().map(|r| r.0).collect();
    while let Some(i) = stack.pop() {
        seen[i] = true;
        stack.extend(&children[i]);
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(TraceParserError::CyclicParentLinks(spans[i].span_id.clone()));
    }
    Ok(SubTrace {
        trace_id: trace_id.to_owned(),
        agent_id: agent_id.to_owned(),
        spans,
        roots,
        children,
    })
}

/// Node of a topology pattern, listed in canonical preorder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoNode {
    pub pattern: PatternId,
    pub operation: String,
    pub parent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<RootKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoPattern {
    pub id: PatternId,
    pub encoding: String,
    pub nodes: Vec<TopoNode>,
    pub entry_ops: Vec<String>,
    pub exit_ops: Vec<String>,
    #[serde(skip)]
    pub match_count: u64,
}

impl TopoPattern {
    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == Some(i))
            .map(|(c, _)| c)
    }

    /// Indices of non-root leaves, the candidate exit points.
    pub fn exit_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].root.is_none() && self.children(i).next().is_none())
            .collect()
    }

    /// Edge vector with `⊥` standing for the parent of the roots
    /// (`~` marks an off-node parent).
    pub fn edge_vector(&self) -> Vec<String> {
        let mut out = Vec::new();
        let roots: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| {
                n.root.map(|k| match k {
                    RootKind::Origin => n.pattern.to_string(),
                    RootKind::Remote => format!("~{}", n.pattern),
                })
            })
            .collect();
        out.push(format!("⊥ → {{{}}}", roots.join(", ")));
        for (i, n) in self.nodes.iter().enumerate() {
            let kids: Vec<String> = self.children(i).map(|c| self.nodes[c].pattern.to_string()).collect();
            if !kids.is_empty() {
                out.push(format!("{} → {{{}}}", n.pattern, kids.join(", ")));
            }
        }
        out
    }
}

/// Encoding of the subtree under each span: `pattern(children...)` with the
/// children sorted by their own encodings.
fn subtree_codes(st: &SubTrace) -> Vec<String> {
    fn fill(st: &SubTrace, i: usize, out: &mut Vec<String>) {
        for &c in &st.children[i] {
            fill(st, c, out);
        }
        let mut kids: Vec<&str> = st.children[i].iter().map(|&c| out[c].as_str()).collect();
        kids.sort_unstable();
        out[i] = format!("{}({})", st.spans[i].pattern_id, kids.join(","));
    }
    let mut out = vec![String::new(); st.spans.len()];
    for &(r, _) in &st.roots {
        fill(st, r, &mut out);
    }
    out
}

fn root_code(kind: RootKind, code: &str) -> String {
    let mark = if kind == RootKind::Origin { '^' } else { '~' };
    format!("{mark}{code}")
}

/// Canonical form of a sub-trace. Only span pattern ids and tree shape are
/// encoded, so listing order, span ids and trace ids never matter.
pub fn encode_topology(st: &SubTrace) -> String {
    let codes = subtree_codes(st);
    let mut roots: Vec<String> = st.roots.iter().map(|&(i, k)| root_code(k, &codes[i])).collect();
    roots.sort_unstable();
    roots.join(";")
}

/// Span indices of `st` in canonical preorder (roots by encoding, children
/// by subtree encoding), with each node's parent position and root kind.
pub fn canonical_order(st: &SubTrace) -> Vec<(usize, Option<usize>, Option<RootKind>)> {
    let codes = subtree_codes(st);
    canonical_order_with(st, &codes)
}

fn canonical_order_with(st: &SubTrace, codes: &[String]) -> Vec<(usize, Option<usize>, Option<RootKind>)> {
    let mut roots: Vec<(String, usize, RootKind)> =
        st.roots.iter().map(|&(i, k)| (root_code(k, &codes[i]), i, k)).collect();
    roots.sort_unstable();
    let mut out = Vec::with_capacity(st.spans.len());
    let mut stack: Vec<(usize, Option<usize>, Option<RootKind>)> =
        roots.into_iter().rev().map(|(_, i, k)| (i, None, Some(k))).collect();
    while let Some((i, parent, root)) = stack.pop() {
        let me = out.len();
        out.push((i, parent, root));
        let mut kids = st.children[i].clone();
        kids.sort_by(|a, b| codes[*a].cmp(&codes[*b]));
        stack.extend(kids.into_iter().rev().map(|c| (c, Some(me), None)));
    }
    out
}

/// Builds the pattern for `st`, with nodes in canonical preorder.
pub fn topo_pattern(st: &SubTrace) -> TopoPattern {
    let codes = subtree_codes(st);
    let mut roots: Vec<String> = st.roots.iter().map(|&(i, k)| root_code(k, &codes[i])).collect();
    roots.sort_unstable();
    let encoding = roots.join(";");
    let nodes = canonical_order_with(st, &codes)
        .into_iter()
        .map(|(i, parent, root)| TopoNode {
            pattern: st.spans[i].pattern_id,
            operation: st.spans[i].operation.clone(),
            parent,
            root,
        })
        .collect();
    TopoPattern {
        id: PatternId::digest("topo", &[encoding.as_bytes()]),
        encoding,
        nodes,
        entry_ops: st.entry_operations().into_iter().map(str::to_owned).collect(),
        exit_ops: st.exit_operations().into_iter().map(str::to_owned).collect(),
        match_count: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(id: &str, parent: Option<&str>, pat: u64, op: &str) -> SubTraceSpan {
        SubTraceSpan {
            span_id: id.into(),
            parent_span_id: parent.map(Into::into),
            pattern_id: PatternId(pat),
            operation: op.into(),
        }
    }

    #[test]
    fn singleton() {
        let st = assemble_subtrace("t", "a", vec![span("s1", None, 1, "op")]).unwrap();
        assert_eq!(st.root_span_ids(), vec!["s1"]);
        assert_eq!(st.roots[0].1, RootKind::Origin);
    }

    #[test]
    fn four_span_shape() {
        // b1e6 -> {ek35, mx7v}, ek35 -> {p8sz}
        let (b1e6, ek35, mx7v, p8sz) = (0xb1e6, 0xe35, 0x317, 0x85);
        let st = assemble_subtrace(
            "t",
            "a",
            vec![
                span("1", None, b1e6, "root"),
                span("2", Some("1"), ek35, "mid"),
                span("3", Some("1"), mx7v, "leaf"),
                span("4", Some("2"), p8sz, "leaf2"),
            ],
        )
        .unwrap();
        assert_eq!(st.roots.len(), 1);
        let tp = topo_pattern(&st);
        let mut kids = [PatternId(ek35).to_string(), PatternId(mx7v).to_string()];
        kids.sort();
        assert_eq!(
            tp.edge_vector(),
            vec![
                format!("⊥ → {{{}}}", PatternId(b1e6)),
                format!("{} → {{{}, {}}}", PatternId(b1e6), kids[0], kids[1]),
                format!("{} → {{{}}}", PatternId(ek35), PatternId(p8sz)),
            ]
        );
        assert_eq!(tp.exit_ops, vec!["leaf", "leaf2"]);
        assert!(tp.entry_ops.is_empty());
    }

    #[test]
    fn self_parent_and_cycles_rejected() {
        assert_eq!(
            assemble_subtrace("t", "a", vec![span("x", Some("x"), 1, "op")]),
            Err(TraceParserError::CyclicParentLinks("x".into()))
        );
        let cyc = vec![span("a", Some("b"), 1, "op"), span("b", Some("a"), 1, "op")];
        assert!(matches!(
            assemble_subtrace("t", "a", cyc),
            Err(TraceParserError::CyclicParentLinks(_))
        ));
        let dup = vec![span("a", None, 1, "op"), span("a", None, 2, "op")];
        assert_eq!(
            assemble_subtrace("t", "a", dup),
            Err(TraceParserError::DuplicateSpanId("a".into()))
        );
    }

    #[test]
    fn off_node_parent_is_remote_entry() {
        let st = assemble_subtrace(
            "t",
            "a",
            vec![span("s", Some("elsewhere"), 5, "catalog.get"), span("c", Some("s"), 6, "db")],
        )
        .unwrap();
        assert_eq!(st.roots, vec![(0, RootKind::Remote)]);
        assert_eq!(st.entry_operations(), vec!["catalog.get"]);
        assert_eq!(st.exit_operations(), vec!["db"]);
        let origin = assemble_subtrace("t", "a", vec![span("s", None, 5, "catalog.get"), span("c", Some("s"), 6, "db")]).unwrap();
        assert_ne!(encode_topology(&st), encode_topology(&origin));
    }

    #[test]
    fn encoding_ignores_ids_and_order() {
        let a = assemble_subtrace(
            "t1",
            "a",
            vec![span("r", None, 1, "o"), span("x", Some("r"), 2, "o"), span("y", Some("r"), 3, "o")],
        )
        .unwrap();
        let b = assemble_subtrace(
            "t2",
            "b",
            vec![span("q", Some("p"), 3, "o"), span("p", None, 1, "o"), span("z", Some("p"), 2, "o")],
        )
        .unwrap();
        assert_eq!(encode_topology(&a), encode_topology(&b));
        assert_eq!(topo_pattern(&a), topo_pattern(&b));
        let c = assemble_subtrace(
            "t3",
            "a",
            vec![
                span("r", None, 1, "o"),
                span("x", Some("r"), 2, "o"),
                span("y", Some("r"), 3, "o"),
                span("w", Some("y"), 3, "o"),
            ],
        )
        .unwrap();
        assert_ne!(encode_topology(&a), encode_topology(&c));
    }

    #[test]
    fn shapes_with_equal_parent_edge_lists_differ() {
        // both trees list the edges 1 -> {2, 2}, 2 -> {2}, 2 -> {3}
        let deep = assemble_subtrace(
            "t",
            "a",
            vec![
                span("r", None, 1, "o"),
                span("a", Some("r"), 2, "o"),
                span("b", Some("r"), 2, "o"),
                span("c", Some("a"), 2, "o"),
                span("d", Some("c"), 3, "o"),
            ],
        )
        .unwrap();
        let wide = assemble_subtrace(
            "t",
            "a",
            vec![
                span("r", None, 1, "o"),
                span("a", Some("r"), 2, "o"),
                span("b", Some("r"), 2, "o"),
                span("c", Some("b"), 2, "o"),
                span("d", Some("a"), 3, "o"),
            ],
        )
        .unwrap();
        let edges = |st: &SubTrace| {
            let mut v = topo_pattern(st).edge_vector();
            v.sort();
            v
        };
        assert_eq!(edges(&deep), edges(&wide));
        assert_ne!(encode_topology(&deep), encode_topology(&wide));
    }
}
