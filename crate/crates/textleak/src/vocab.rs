//! Word-level vocabulary and tokenizer.
//!
//! Tokenization lowercases, splits on whitespace, and treats every other
//! non-alphanumeric character as its own single-character token, so
//! "Great movie!" becomes `["great", "movie", "!"]`. Vocabularies are built
//! from a corpus in first-appearance order after three fixed special ids:
//! 0 = sequence-start marker, 1 = padding, 2 = unknown.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const SPECIALS: [&str; 3] = ["<cls>", "<pad>", "<unk>"];

/// Token table with O(1) lookup in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Serialized form: just the token list; the reverse index is rebuilt.
#[derive(Serialize, Deserialize)]
struct VocabData {
    tokens: Vec<String>,
}

impl From<VocabData> for Vocab {
    fn from(d: VocabData) -> Self {
        let index =
            d.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens: d.tokens, index }
    }
}

impl From<Vocab> for VocabData {
    fn from(v: Vocab) -> Self {
        VocabData { tokens: v.tokens }
    }
}

/// Splits text into lowercase word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocab {
    /// Builds a vocabulary from corpus lines: specials first, then every
    /// distinct token in first-appearance order. Deterministic for a given
    /// input sequence.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for text in texts {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                }
            }
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Encodes text, mapping out-of-vocabulary tokens to the unknown id.
    /// Returns the ids and how many tokens fell back to unknown.
    pub fn encode(&self, text: &str) -> (Vec<u32>, usize) {
        let mut unknown = 0;
        let ids = tokenize(text)
            .into_iter()
            .map(|t| {
                self.id(&t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Renders ids as space-joined tokens. Inverse of `encode` on
    /// whitespace-normalized in-vocabulary text (see `normalize`).
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<bad-id>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Canonical spacing for comparisons: tokenize then re-join. For any
    /// in-vocabulary text, `decode(encode(normalize(s))) == normalize(s)`.
    pub fn normalize(text: &str) -> String {
        tokenize(text).join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Great movie!"), vec!["great", "movie", "!"]);
        assert_eq!(tokenize("  the   plot, thin  "), vec!["the", "plot", ",", "thin"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["a b"]);
        assert_eq!(v.id("<cls>"), Some(CLS_ID));
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
        assert_eq!(v.id("<unk>"), Some(UNK_ID));
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
    }

    #[test]
    fn build_is_first_appearance_ordered_and_dense() {
        let v = Vocab::build(["b a", "a c b"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("c"));
    }

    #[test]
    fn encode_maps_oov_to_unk_and_counts() {
        let v = Vocab::build(["the movie"]);
        let (ids, unknown) = v.encode("the unseen movie");
        assert_eq!(ids, vec![3, UNK_ID, 4]);
        assert_eq!(unknown, 1);
    }

    #[test]
    fn decode_encode_roundtrip_on_normalized_text() {
        let v = Vocab::build(["the plot was thin , but fun !"]);
        let s = Vocab::normalize("The plot , but FUN!");
        let (ids, unknown) = v.encode(&s);
        assert_eq!(unknown, 0);
        assert_eq!(v.decode(&ids), s);
    }

    #[test]
    fn serde_roundtrip_rebuilds_index() {
        let v = Vocab::build(["alpha beta"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("beta"), Some(4));
    }
}
