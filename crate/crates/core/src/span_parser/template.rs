//! Token-aligned wildcard templates for string attributes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lcs::lcs_alignment;
use crate::token::Token;

pub const WILDCARD: &str = "<*>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template has {expected} wildcards, got {got} parameters")]
    ParamCount { expected: usize, got: usize },
}

/// One template position: a literal token, or a wildcard matching a run of one
/// or more tokens. A wildcard carries the whitespace in front of its run when
/// every value in the cluster agrees on it; otherwise that whitespace is part
/// of the extracted parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    #[serde(rename = "f")]
    Fixed(Token),
    #[serde(rename = "w")]
    Wild(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Template(pub Vec<Element>);

/// Text captured by a wildcard for the token run `run`.
pub(crate) fn capture(lead: &Option<String>, run: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in run.iter().enumerate() {
        if i > 0 || lead.is_none() {
            out.push_str(&t.lead);
        }
        out.push_str(&t.text);
    }
    out
}

impl Template {
    /// Template matching exactly `tokens`.
    pub fn literal(tokens: &[Token]) -> Template {
        Template(tokens.iter().cloned().map(Element::Fixed).collect())
    }

    /// Shortest template covering every member of a cluster: pairwise LCS
    /// merges folded over the members in order.
    pub fn extract<T: AsRef<[Token]>>(cluster: &[T]) -> Option<Template> {
        let (first, rest) = cluster.split_first()?;
        let mut template = Template::literal(first.as_ref());
        for member in rest {
            template = template.merge(member.as_ref());
        }
        Some(template)
    }

    pub fn wildcard_count(&self) -> usize {
        self.0
            .iter()
            .filter(|e| matches!(e, Element::Wild(_)))
            .count()
    }

    pub fn elements(&self) -> &[Element] {
        &self.0
    }

    /// Generalizes the template so that it also covers `value`.
    ///
    /// Literal tokens on the LCS between the template's literals and the value
    /// stay; every other region becomes a single wildcard. A region that is
    /// empty on one side and not on the other absorbs its neighbouring anchor,
    /// so each wildcard spans at least one token in every covered value.
    pub fn merge(&self, value: &[Token]) -> Template {
        let fixed_at: Vec<usize> = self
            .0
            .iter()
            .enumerate()
            .filter_map(|(i, e)| matches!(e, Element::Fixed(_)).then_some(i))
            .collect();
        let fixed: Vec<&Token> = fixed_at
            .iter()
            .map(|&i| match &self.0[i] {
                Element::Fixed(t) => t,
                Element::Wild(_) => unreachable!(),
            })
            .collect();
        let value_refs: Vec<&Token> = value.iter().collect();
        let mut anchors: Vec<(usize, usize)> = lcs_alignment(&fixed, &value_refs)
            .into_iter()
            .map(|(fi, vj)| (fixed_at[fi], vj))
            .collect();

        let gap = |anchors: &[(usize, usize)], g: usize| {
            let ts = if g == 0 { 0 } else { anchors[g - 1].0 + 1 };
            let te = anchors.get(g).map_or(self.0.len(), |a| a.0);
            let vs = if g == 0 { 0 } else { anchors[g - 1].1 + 1 };
            let ve = anchors.get(g).map_or(value.len(), |a| a.1);
            (ts, te, vs, ve)
        };

        'fix: loop {
            for g in 0..=anchors.len() {
                let (ts, te, vs, ve) = gap(&anchors, g);
                if (ts == te) != (vs == ve) && !anchors.is_empty() {
                    let drop = if g < anchors.len() { g } else { g - 1 };
                    anchors.remove(drop);
                    continue 'fix;
                }
            }
            break;
        }

        let mut out = Vec::with_capacity(anchors.len() * 2 + 1);
        for g in 0..=anchors.len() {
            let (ts, te, vs, ve) = gap(&anchors, g);
            if ts != te || vs != ve {
                let template_lead = match self.0.get(ts) {
                    Some(Element::Fixed(t)) if ts < te => Some(&t.lead),
                    Some(Element::Wild(l)) if ts < te => l.as_ref(),
                    _ => None,
                };
                let value_lead = value.get(vs).filter(|_| vs < ve).map(|t| &t.lead);
                let lead = match (template_lead, value_lead) {
                    (Some(a), Some(b)) if a == b => Some(a.clone()),
                    _ => None,
                };
                out.push(Element::Wild(lead));
            }
            if let Some(&(_, vj)) = anchors.get(g) {
                out.push(Element::Fixed(value[vj].clone()));
            }
        }
        Template(out)
    }

    /// Wildcard fill-ins for `tokens`, or `None` if the template does not match.
    pub fn extract_params(&self, tokens: &[Token]) -> Option<Vec<String>> {
        let mut out = Vec::with_capacity(self.wildcard_count());
        self.match_from(0, tokens, 0, &mut out).then_some(out)
    }

    fn match_from(&self, ei: usize, tokens: &[Token], ti: usize, out: &mut Vec<String>) -> bool {
        let Some(elem) = self.0.get(ei) else {
            return ti == tokens.len();
        };
        match elem {
            Element::Fixed(t) => {
                tokens.get(ti) == Some(t) && self.match_from(ei + 1, tokens, ti + 1, out)
            }
            Element::Wild(lead) => {
                let Some(first) = tokens.get(ti) else {
                    return false;
                };
                if lead.as_ref().is_some_and(|l| *l != first.lead) {
                    return false;
                }
                let next_fixed = match self.0.get(ei + 1) {
                    Some(Element::Fixed(t)) => Some(t),
                    _ => None,
                };
                for end in (ti + 1..=tokens.len()).rev() {
                    if let Some(t) = next_fixed {
                        if tokens.get(end) != Some(t) {
                            continue;
                        }
                    } else if end != tokens.len() && ei + 1 == self.0.len() {
                        continue;
                    }
                    out.push(capture(lead, &tokens[ti..end]));
                    if self.match_from(ei + 1, tokens, end, out) {
                        return true;
                    }
                    out.pop();
                }
                false
            }
        }
    }

    /// Substitutes `params` into the wildcards.
    pub fn render(&self, params: &[String]) -> Result<String, TemplateError> {
        let expected = self.wildcard_count();
        if params.len() != expected {
            return Err(TemplateError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        let mut out = String::new();
        let mut next = params.iter();
        for e in &self.0 {
            match e {
                Element::Fixed(t) => t.push_to(&mut out),
                Element::Wild(lead) => {
                    if let Some(l) = lead {
                        out.push_str(l);
                    }
                    out.push_str(next.next().map(String::as_str).unwrap_or_default());
                }
            }
        }
        Ok(out)
    }

    /// Human-readable form with variables masked as `<*>`.
    pub fn masked(&self) -> String {
        let mut out = String::new();
        for e in &self.0 {
            match e {
                Element::Fixed(t) => t.push_to(&mut out),
                Element::Wild(lead) => {
                    if let Some(l) = lead {
                        out.push_str(l);
                    }
                    out.push_str(WILDCARD);
                }
            }
        }
        out
    }

    pub(crate) fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).unwrap_or_default()
    }
}
