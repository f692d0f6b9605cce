//! Vocabulary, reserved symbols, and the toy tokenizer shared by every
//! pipeline stage.
//!
//! The vocabulary is a dense `token -> id` map whose first ten ids are fixed
//! reserved symbols. Keeping the reserved block pinned means serialized
//! statement files stay portable across encoder configurations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token id into a [`Vocabulary`]. Ids are dense `0..vocab_size`.
pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const BLANK: TokenId = 5;
pub const E1_START: TokenId = 6;
pub const E1_END: TokenId = 7;
pub const E2_START: TokenId = 8;
pub const E2_END: TokenId = 9;

/// Reserved tokens, in id order. These always occupy ids `0..10`.
pub const RESERVED: [&str; 10] = [
    "[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]", "[BLANK]", "[E1start]", "[E1end]", "[E2start]",
    "[E2end]",
];

/// Immutable token <-> id map. Build once with [`build_vocab`], then share
/// freely across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, TokenId>,
    token_of: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            id_of,
            token_of: tokens,
        }
    }

    /// Number of tokens, reserved block included.
    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    /// Id for `token`, or [`UNK`] if the token is out of vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    /// Id for `token` only if it is actually in the vocabulary.
    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    /// Token string for `id`. Panics on out-of-range ids, which indicate a
    /// vocabulary/data mismatch rather than a recoverable condition.
    pub fn token(&self, id: TokenId) -> &str {
        &self.token_of[id as usize]
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Map a token sequence to ids, substituting [`UNK`] where needed.
    pub fn encode(&self, tokens: &[impl AsRef<str>]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Inverse of [`Vocabulary::encode`].
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for token in &self.token_of {
            let _ = writeln!(out, "{token}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary file has {} lines, expected at least {}",
                tokens.len(),
                RESERVED.len()
            )));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Config(format!(
                    "vocabulary line {i} is {:?}, expected reserved token {expected:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized form. Stored in checkpoints so a model is
    /// never silently evaluated against the wrong vocabulary.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

/// Build a vocabulary from a token stream. Tokens seen at least `min_count`
/// times get an id; everything else maps to [`UNK`]. Ids are assigned by
/// descending frequency, ties broken by lexicographic token order, so the
/// result only depends on the multiset of tokens.
pub fn build_vocab<I, S>(corpus_tokens: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    assert!(min_count >= 1, "min_count must be >= 1");
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for token in corpus_tokens {
        seen_any = true;
        let token = token.as_ref();
        if RESERVED.contains(&token) {
            continue;
        }
        *counts.entry(token.to_string()).or_insert(0) += 1;
    }
    if !seen_any {
        return Err(Error::EmptyCorpus);
    }

    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, count)| *count >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|t| t.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from_tokens(tokens))
}

const SPLIT_PUNCT: [char; 8] = ['.', ',', ';', ':', '"', '\'', '(', ')'];

/// Lowercasing whitespace tokenizer that splits a small punctuation set into
/// standalone tokens. Deliberately simple: desk-scale corpora are synthetic,
/// so subword modeling would add complexity without test value.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if SPLIT_PUNCT.contains(&ch) {
                if !current.is_empty() {
                    out.push(current.to_lowercase());
                    current = String::new();
                }
                out.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            out.push(current.to_lowercase());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_occupy_first_ten_ids() {
        let vocab = build_vocab(["a"], 1).unwrap();
        for (i, expected) in RESERVED.iter().enumerate() {
            assert_eq!(vocab.token(i as TokenId), *expected);
        }
        assert_eq!(vocab.id("[BLANK]"), BLANK);
        assert_eq!(vocab.id("[E2end]"), E2_END);
    }

    #[test]
    fn min_count_threshold() {
        let vocab = build_vocab(["a", "b", "a"], 2).unwrap();
        assert_eq!(vocab.len(), 11);
        assert_ne!(vocab.id("a"), UNK);
        assert_eq!(vocab.id("b"), UNK);
    }

    #[test]
    fn single_token_vocab_size() {
        let vocab = build_vocab(["x"], 1).unwrap();
        assert_eq!(vocab.len(), 11);
    }

    #[test]
    fn ties_broken_lexicographically_regardless_of_insertion_order() {
        // Independent oracle: enumerate both insertion orders, the result
        // must be identical and the smaller token must get the lower id.
        let forward = build_vocab(["zeta", "alpha"], 1).unwrap();
        let backward = build_vocab(["alpha", "zeta"], 1).unwrap();
        assert_eq!(forward, backward);
        assert!(forward.id("alpha") < forward.id("zeta"));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let err = build_vocab(std::iter::empty::<&str>(), 1).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Bell Labs."), vec!["bell", "labs", "."]);
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_keeps_slash_compounds() {
        assert_eq!(tokenize("C/Unix thinking"), vec!["c/unix", "thinking"]);
    }

    #[test]
    fn ids_are_dense_and_inverse() {
        let vocab = build_vocab(["b", "a", "c", "a"], 1).unwrap();
        for id in 0..vocab.len() as TokenId {
            assert_eq!(vocab.id(vocab.token(id)), id);
        }
    }

    #[test]
    fn text_round_trip_preserves_ids() {
        let vocab = build_vocab(["b", "a", "c", "a"], 1).unwrap();
        let restored = Vocabulary::from_text(&vocab.to_text()).unwrap();
        assert_eq!(vocab, restored);
        assert_eq!(vocab.content_hash(), restored.content_hash());
    }
}
