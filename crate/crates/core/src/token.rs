//! Word/punctuation tokenizer used by the string attribute parsers.
//!
//! Text splits on whitespace; every ASCII punctuation character is a token of
//! its own. Each token remembers the whitespace that preceded it so a token
//! sequence always renders back to the exact input. Trailing whitespace is kept
//! as a final token with empty text.

use serde::{Deserialize, Serialize};

/// A token plus the whitespace run in front of it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub lead: String,
    pub text: String,
}

impl Token {
    pub fn new(lead: impl Into<String>, text: impl Into<String>) -> Self {
        Token {
            lead: lead.into(),
            text: text.into(),
        }
    }

    /// Trailing-whitespace marker (empty text).
    pub fn is_trailer(&self) -> bool {
        self.text.is_empty()
    }

    pub fn push_to(&self, out: &mut String) {
        out.push_str(&self.lead);
        out.push_str(&self.text);
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Splits `text` into words and single punctuation characters.
///
/// `tokenize("a=1,b=2") == ["a", "=", "1", ",", "b", "=", "2"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_gaps(text)
        .into_iter()
        .filter(|t| !t.is_trailer())
        .map(|t| t.text)
        .collect()
}

/// Tokenizes keeping the separators, see module docs.
pub fn tokenize_with_gaps(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut lead_start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let lead = &text[lead_start..i];
        if is_punct(c) {
            chars.next();
            let end = i + c.len_utf8();
            out.push(Token::new(lead, &text[i..end]));
            lead_start = end;
            continue;
        }
        let mut end = i;
        while let Some(&(j, d)) = chars.peek() {
            if d.is_whitespace() || is_punct(d) {
                break;
            }
            end = j + d.len_utf8();
            chars.next();
        }
        out.push(Token::new(lead, &text[i..end]));
        lead_start = end;
    }
    if lead_start < text.len() {
        out.push(Token::new(&text[lead_start..], ""));
    }
    out
}

/// Inverse of [`tokenize_with_gaps`].
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        t.push_to(&mut out);
    }
    out
}
