//! Joining per-agent segments of one trace into a tree.
//!
//! A segment root whose parent lives on another node is attached under a leaf
//! of another segment with the same operation name: the caller's client span
//! and the callee's server span share the operation.

use std::collections::HashSet;

use crate::trace_parser::{RootKind, TopoPattern};

/// A candidate segment: a topology pattern seen on one agent.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRef<'a> {
    pub topo: &'a TopoPattern,
    pub agent_id: &'a str,
}

/// `child` (segment, node) hangs under `parent` (segment, node).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub child: (usize, usize),
    pub parent: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stitched {
    pub links: Vec<Link>,
    /// Off-node roots with no matching exit anywhere.
    pub unresolved: Vec<(usize, usize)>,
    pub fragmented: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Confidence {
    Low,
    High,
}

/// Segments must be given in a fixed order (the backend sorts them by topo
/// id, then agent); earlier segments win ties.
pub fn stitch_segments(segs: &[SegmentRef<'_>]) -> Stitched {
    let mut links: Vec<Link> = Vec::new();
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut unresolved = Vec::new();
    let exits: Vec<Vec<usize>> = segs.iter().map(|s| s.topo.exit_nodes()).collect();

    for (si, s) in segs.iter().enumerate() {
        for (ni, node) in s.topo.nodes.iter().enumerate() {
            if node.root != Some(RootKind::Remote) {
                continue;
            }
            let pick = segs.iter().enumerate().find_map(|(ti, _)| {
                if ti == si || reaches(&links, si, ti) {
                    return None;
                }
                exits[ti]
                    .iter()
                    .find(|&&e| !used.contains(&(ti, e)) && segs[ti].topo.nodes[e].operation == node.operation)
                    .map(|&e| (ti, e))
            });
            match pick {
                Some(p) => {
                    used.insert(p);
                    links.push(Link {
                        child: (si, ni),
                        parent: p,
                    });
                }
                None => unresolved.push((si, ni)),
            }
        }
    }
    let fragmented = !unresolved.is_empty() || components(segs.len(), &links) > 1;
    Stitched {
        links,
        unresolved,
        fragmented,
    }
}

/// Whether `to` is below `from` through existing links.
fn reaches(links: &[Link], from: usize, to: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = HashSet::new();
    while let Some(s) = stack.pop() {
        if s == to {
            return true;
        }
        if seen.insert(s) {
            stack.extend(links.iter().filter(|l| l.parent.0 == s).map(|l| l.child.0));
        }
    }
    false
}

fn components(n: usize, links: &[Link]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for l in links {
        let (a, b) = (find(&mut parent, l.child.0), find(&mut parent, l.parent.0));
        parent[a] = b;
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Confidence per segment. A segment keeps high confidence when it is chained
/// to another segment, when emitted parameters back it, or when it is the only
/// segment holding a trace origin; everything else is demoted, never dropped.
pub fn filter_false_positive(segs: &[SegmentRef<'_>], stitched: &Stitched, corroborated: &[bool]) -> Vec<Confidence> {
    let has_origin = |s: &SegmentRef<'_>| s.topo.nodes.iter().any(|n| n.root == Some(RootKind::Origin));
    let origins = segs.iter().filter(|s| has_origin(s)).count();
    segs.iter()
        .enumerate()
        .map(|(i, s)| {
            let chained = stitched.links.iter().any(|l| l.child.0 == i || l.parent.0 == i);
            let backed = corroborated.get(i).copied().unwrap_or(false);
            if chained || backed || (has_origin(s) && origins == 1) {
                Confidence::High
            } else {
                Confidence::Low
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::PatternId;
    use crate::trace_parser::{assemble_subtrace, topo_pattern, SubTraceSpan};

    fn topo(spans: &[(&str, Option<&str>, u64, &str)]) -> TopoPattern {
        let spans = spans
            .iter()
            .map(|(id, parent, pat, op)| SubTraceSpan {
                span_id: id.to_string(),
                parent_span_id: parent.map(str::to_owned),
                pattern_id: PatternId(*pat),
                operation: op.to_string(),
            })
            .collect();
        topo_pattern(&assemble_subtrace("t", "a", spans).unwrap())
    }

    fn frontend() -> TopoPattern {
        topo(&[("1", None, 1, "GET /product"), ("2", Some("1"), 3, "catalog.get")])
    }

    fn catalog() -> TopoPattern {
        topo(&[("3", Some("2"), 5, "catalog.get"), ("4", Some("3"), 6, "db.query")])
    }

    #[test]
    fn two_segments_join() {
        let (f, c) = (frontend(), catalog());
        let segs = [SegmentRef { topo: &c, agent_id: "a1" }, SegmentRef { topo: &f, agent_id: "a0" }];
        let st = stitch_segments(&segs);
        assert_eq!(st.links, vec![Link { child: (0, 0), parent: (1, 1) }]);
        assert!(!st.fragmented);
        assert_eq!(filter_false_positive(&segs, &st, &[false, false]), vec![Confidence::High; 2]);
    }

    #[test]
    fn single_segment_is_itself() {
        let f = topo(&[("1", None, 1, "GET /")]);
        let segs = [SegmentRef { topo: &f, agent_id: "a0" }];
        let st = stitch_segments(&segs);
        assert!(st.links.is_empty() && !st.fragmented);
        assert_eq!(filter_false_positive(&segs, &st, &[false]), vec![Confidence::High]);
    }

    #[test]
    fn no_overlap_is_fragmented() {
        let f = topo(&[("1", None, 1, "GET /")]);
        let cart = topo(&[("9", Some("x"), 10, "cart.get")]);
        let segs = [SegmentRef { topo: &f, agent_id: "a0" }, SegmentRef { topo: &cart, agent_id: "a3" }];
        let st = stitch_segments(&segs);
        assert!(st.fragmented);
        assert_eq!(st.unresolved, vec![(1, 0)]);
        // the chainless remote segment is the suspect
        assert_eq!(filter_false_positive(&segs, &st, &[false, false]), vec![Confidence::High, Confidence::Low]);
        assert_eq!(filter_false_positive(&segs, &st, &[false, true]), vec![Confidence::High; 2]);
    }

    #[test]
    fn three_segment_chain() {
        let checkout_front = topo(&[("1", None, 2, "POST /checkout"), ("2", Some("1"), 4, "checkout.place")]);
        let checkout = topo(&[
            ("3", Some("2"), 7, "checkout.place"),
            ("4", Some("3"), 8, "db.insert"),
            ("5", Some("3"), 9, "cart.get"),
        ]);
        let cart = topo(&[("6", Some("5"), 10, "cart.get")]);
        let segs = [
            SegmentRef { topo: &cart, agent_id: "a3" },
            SegmentRef { topo: &checkout, agent_id: "a2" },
            SegmentRef { topo: &checkout_front, agent_id: "a0" },
        ];
        let st = stitch_segments(&segs);
        assert_eq!(st.links.len(), 2);
        assert!(!st.fragmented);
        assert_eq!(filter_false_positive(&segs, &st, &[false; 3]), vec![Confidence::High; 3]);
    }

    #[test]
    fn tie_break_prefers_earlier_segment() {
        let f = frontend();
        let c = catalog();
        let segs = [
            SegmentRef { topo: &f, agent_id: "a0" },
            SegmentRef { topo: &f, agent_id: "a9" },
            SegmentRef { topo: &c, agent_id: "a1" },
        ];
        let st = stitch_segments(&segs);
        assert_eq!(st.links[0].parent.0, 0);
        assert!(st.fragmented);
    }
}
