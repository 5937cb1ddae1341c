//! Prefix tree over string templates.
//!
//! Templates sharing leading elements share a path. Lookup walks the tree with
//! backtracking: at every node a literal edge is tried before any wildcard
//! edge, so the template with the longest literal prefix wins.

use std::collections::HashMap;

use super::template::{capture, Element, Template};
use crate::ids::PatternId;
use crate::token::Token;

#[derive(Debug, Default, Clone)]
struct Node {
    fixed: HashMap<Token, usize>,
    // Some(lead) edges sorted before None
    wild: Vec<(Option<String>, usize)>,
    terminal: Option<PatternId>,
}

#[derive(Debug, Clone)]
pub struct PrefixTree {
    nodes: Vec<Node>,
    len: usize,
}

impl Default for PrefixTree {
    fn default() -> Self {
        PrefixTree {
            nodes: vec![Node::default()],
            len: 0,
        }
    }
}

impl PrefixTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of templates stored.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, template: &Template, id: PatternId) {
        let mut node = 0;
        for e in template.elements() {
            node = match e {
                Element::Fixed(t) => match self.nodes[node].fixed.get(t) {
                    Some(&c) => c,
                    None => {
                        let c = self.push_node();
                        self.nodes[node].fixed.insert(t.clone(), c);
                        c
                    }
                },
                Element::Wild(lead) => {
                    match self.nodes[node].wild.iter().find(|(l, _)| l == lead) {
                        Some(&(_, c)) => c,
                        None => {
                            let c = self.push_node();
                            let wild = &mut self.nodes[node].wild;
                            wild.push((lead.clone(), c));
                            wild.sort_by(|a, b| match (&a.0, &b.0) {
                                (Some(x), Some(y)) => x.cmp(y),
                                (Some(_), None) => std::cmp::Ordering::Less,
                                (None, Some(_)) => std::cmp::Ordering::Greater,
                                (None, None) => std::cmp::Ordering::Equal,
                            });
                            c
                        }
                    }
                }
            };
        }
        if self.nodes[node].terminal.replace(id).is_none() {
            self.len += 1;
        }
    }

    /// Detaches a template; its path nodes stay allocated.
    pub fn remove(&mut self, template: &Template) -> Option<PatternId> {
        let mut node = 0;
        for e in template.elements() {
            node = match e {
                Element::Fixed(t) => *self.nodes[node].fixed.get(t)?,
                Element::Wild(lead) => self.nodes[node].wild.iter().find(|(l, _)| l == lead)?.1,
            };
        }
        let old = self.nodes[node].terminal.take();
        if old.is_some() {
            self.len -= 1;
        }
        old
    }

    fn push_node(&mut self) -> usize {
        self.nodes.push(Node::default());
        self.nodes.len() - 1
    }

    /// Finds the matching template and extracts its wildcard parameters.
    pub fn find(&self, tokens: &[Token]) -> Option<(PatternId, Vec<String>)> {
        let mut params = Vec::new();
        let id = self.walk(0, tokens, 0, &mut params)?;
        Some((id, params))
    }

    fn walk(&self, node: usize, tokens: &[Token], pos: usize, params: &mut Vec<String>) -> Option<PatternId> {
        let n = &self.nodes[node];
        if pos == tokens.len() {
            return n.terminal;
        }
        if let Some(&child) = n.fixed.get(&tokens[pos]) {
            if let Some(id) = self.walk(child, tokens, pos + 1, params) {
                return Some(id);
            }
        }
        for (lead, child) in &n.wild {
            if lead.as_ref().is_some_and(|l| *l != tokens[pos].lead) {
                continue;
            }
            let next = &self.nodes[*child];
            for end in (pos + 1..=tokens.len()).rev() {
                let viable = if end == tokens.len() {
                    next.terminal.is_some()
                } else {
                    next.fixed.contains_key(&tokens[end])
                };
                if !viable {
                    continue;
                }
                params.push(capture(lead, &tokens[pos..end]));
                if let Some(id) = self.walk(*child, tokens, end, params) {
                    return Some(id);
                }
                params.pop();
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::tokenize_with_gaps as t;

    fn tpl(values: &[&str]) -> Template {
        let toks: Vec<_> = values.iter().map(|v| t(v)).collect();
        Template::extract(&toks).unwrap()
    }

    #[test]
    fn exact_path() {
        let mut tree = PrefixTree::new();
        tree.insert(&tpl(&["GET /health"]), PatternId(1));
        assert_eq!(tree.find(&t("GET /health")), Some((PatternId(1), vec![])));
    }

    #[test]
    fn no_root_match() {
        let mut tree = PrefixTree::new();
        tree.insert(&tpl(&["GET /health"]), PatternId(1));
        assert_eq!(tree.find(&t("POST /health")), None);
        assert_eq!(PrefixTree::new().find(&t("x")), None);
    }

    #[test]
    fn literal_beats_wildcard() {
        let general = tpl(&["GET alpha", "GET beta/c"]);
        assert_eq!(general.masked(), "GET <*>");
        let specific = tpl(&["GET /health"]);
        for order in [[0, 1], [1, 0]] {
            let mut tree = PrefixTree::new();
            let both = [(&general, PatternId(10)), (&specific, PatternId(20))];
            for i in order {
                tree.insert(both[i].0, both[i].1);
            }
            assert_eq!(tree.find(&t("GET /health")).unwrap().0, PatternId(20));
            let (id, p) = tree.find(&t("GET /x/y")).unwrap();
            assert_eq!(id, PatternId(10));
            assert_eq!(p, vec!["/x/y".to_string()]);
        }
    }

    #[test]
    fn shared_prefixes_and_removal() {
        let mut tree = PrefixTree::new();
        let a = tpl(&["SELECT a FROM t WHERE id = 1", "SELECT a FROM t WHERE id = 2"]);
        let b = tpl(&["SELECT b FROM t"]);
        tree.insert(&a, PatternId(1));
        tree.insert(&b, PatternId(2));
        assert_eq!(tree.len(), 2);
        assert_eq!(
            tree.find(&t("SELECT a FROM t WHERE id = 99")),
            Some((PatternId(1), vec!["99".into()]))
        );
        assert_eq!(tree.remove(&a), Some(PatternId(1)));
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.find(&t("SELECT a FROM t WHERE id = 99")), None);
        assert_eq!(tree.find(&t("SELECT b FROM t")).unwrap().0, PatternId(2));
    }

    #[test]
    fn empty_value_and_empty_template() {
        let mut tree = PrefixTree::new();
        tree.insert(&Template(vec![]), PatternId(5));
        assert_eq!(tree.find(&[]), Some((PatternId(5), vec![])));
    }

    #[test]
    fn backtracks_past_a_dead_literal_branch() {
        let mut tree = PrefixTree::new();
        tree.insert(&tpl(&["a b c"]), PatternId(1));
        tree.insert(&tpl(&["a 1 d", "a 2 d"]), PatternId(2));
        // literal "b" path fails at "d", wildcard path succeeds
        assert_eq!(
            tree.find(&t("a b d")),
            Some((PatternId(2), vec!["b".into()]))
        );
    }
}
