//! Word-level tokenizer with a closed vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::constraints::MASK_TOKEN;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", MASK_TOKEN];

/// Lowercases, drops punctuation and splits on whitespace. A bracketed mask
/// token (any case) survives as `[MASK]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let trimmed = word.trim_matches(|c: char| c.is_ascii_punctuation() && c != '[' && c != ']');
        if trimmed.eq_ignore_ascii_case(MASK_TOKEN) {
            out.push(MASK_TOKEN.to_string());
            continue;
        }
        let cleaned: String = trimmed.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
        if !cleaned.is_empty() {
            out.push(cleaned);
        }
    }
    out
}

/// `tokenize` joined back with single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        if r.tokens.len() < SPECIALS.len() || r.tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Input("vocabulary must start with the five special tokens".into()));
        }
        let index: HashMap<String, usize> = r.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != r.tokens.len() {
            return Err(Error::Input("duplicate vocabulary entry".into()));
        }
        Ok(Vocab { tokens: r.tokens, index })
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    /// Specials first, then every distinct token of `texts` in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(tokenize)
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens, skipping padding and sequence markers and stopping at `[EOS]`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("What is the Red cup used for?"), ["what", "is", "the", "red", "cup", "used", "for"]);
        assert_eq!(tokenize("Shelf is at a location of [Mask]."), ["shelf", "is", "at", "a", "location", "of", "[MASK]"]);
        assert_eq!(tokenize("  it's   fine  "), ["its", "fine"]);
        assert!(tokenize("?! ...").is_empty());
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocab::build(["zebra apple", "apple [MASK]"]);
        assert_eq!(&v.tokens()[..5], &SPECIALS);
        assert_eq!(v.id("[MASK]"), MASK);
        assert_eq!(v.tokens()[5..], ["apple", "zebra"]);
        assert_eq!(v.id("banana"), UNK);
    }

    #[test]
    fn decode_inverts_encode_for_known_text() {
        let text = "Where is the small red cup, [MASK]?";
        let v = Vocab::build([text]);
        assert_eq!(v.decode(&v.encode(text)), normalize(text));
        let mut ids = vec![BOS];
        ids.extend(v.encode(text));
        ids.extend([EOS, v.id("cup")]);
        assert_eq!(v.decode(&ids), normalize(text));
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let v = Vocab::build(["a b c"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"{"tokens":["a"]}"#).is_err());
    }
}
