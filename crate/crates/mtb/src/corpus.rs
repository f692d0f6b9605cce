//! Entity-linked documents and the relation statements extracted from them.
//!
//! A relation statement is a token window containing two marked entity
//! mentions, wrapped in `[CLS]`/`[SEP]`. Extraction emits one statement per
//! in-window, non-overlapping mention pair, ordered by textual position, so
//! slot assignment (which mention is `s1`) is deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tokens::{TokenId, Vocabulary, CLS, SEP};

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn shifted(&self, delta: isize) -> Span {
        Span {
            start: (self.start as isize + delta) as usize,
            end: (self.end as isize + delta) as usize,
        }
    }
}

/// One linked entity mention inside a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

impl Mention {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// A tokenized document with entity-linked mention spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl Document {
    /// Validates span bounds and sorts mentions by start position.
    /// Overlapping mentions are permitted here; they are rejected at pairing
    /// time instead.
    pub fn new(doc_id: impl Into<String>, tokens: Vec<String>, mut mentions: Vec<Mention>) -> Result<Self> {
        let doc_id = doc_id.into();
        for m in &mentions {
            if m.start >= m.end || m.end > tokens.len() {
                return Err(Error::Config(format!(
                    "mention ({}, {}) out of bounds in document {doc_id:?} of length {}",
                    m.start,
                    m.end,
                    tokens.len()
                )));
            }
        }
        mentions.sort_by(|a, b| {
            (a.start, a.end, &a.entity_id).cmp(&(b.start, b.end, &b.entity_id))
        });
        Ok(Document {
            doc_id,
            tokens,
            mentions,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let _ = Document::new(self.doc_id.clone(), self.tokens.clone(), self.mentions.clone())?;
        Ok(())
    }
}

/// Where a statement came from: the document and the window start offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub offset: usize,
}

/// A relation statement: token ids `x` starting with `[CLS]` and ending with
/// `[SEP]`, two entity spans indexed into `x`, and the linked entity ids.
/// `s1` is always the textually earlier mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationStatement {
    pub x: Vec<TokenId>,
    pub s1: Span,
    pub s2: Span,
    pub e1: String,
    pub e2: String,
    pub source: Provenance,
}

impl RelationStatement {
    /// Machine-checkable form of the structural invariants: spans strictly
    /// inside the `[CLS]`..`[SEP]` hull, `s1` before `s2`, no overlap.
    pub fn validate(&self) -> Result<()> {
        let n = self.x.len().saturating_sub(1);
        let ok = self.x.len() >= 4
            && self.x[0] == CLS
            && self.x[n] == SEP
            && 0 < self.s1.start
            && self.s1.start < self.s1.end
            && self.s1.end <= self.s2.start
            && self.s2.start < self.s2.end
            && self.s2.end <= n;
        if ok {
            Ok(())
        } else {
            Err(Error::SpanOverlap(
                self.s1.start,
                self.s1.end,
                self.s2.start,
                self.s2.end,
            ))
        }
    }

    /// Ordered entity-pair key used for positive matching.
    pub fn pair_key(&self) -> (String, String) {
        (self.e1.clone(), self.e2.clone())
    }
}

/// Window start for a mention pair: centered on the midpoint of the combined
/// extent, clipped to document bounds. Assumes the extent fits in `win_len`.
fn window_start(extent_start: usize, extent_end: usize, win_len: usize, doc_len: usize) -> usize {
    let start = (extent_start + extent_end).saturating_sub(win_len) / 2;
    start.min(doc_len - win_len)
}

/// Extract one statement per ordered mention pair that fits in a window of
/// `window` original tokens. Output is sorted by
/// `(offset, s1.start, s2.start, e1, e2)` within the document.
pub fn extract_statements(
    doc: &Document,
    vocab: &Vocabulary,
    window: usize,
) -> Vec<RelationStatement> {
    assert!(window >= 2, "window must be >= 2");
    let doc_len = doc.tokens.len();
    if doc_len == 0 {
        return Vec::new();
    }
    let win_len = window.min(doc_len);

    let mut out = Vec::new();
    for (ai, a) in doc.mentions.iter().enumerate() {
        for b in doc.mentions.iter().skip(ai + 1) {
            // Mentions are sorted by start; require strict textual order and
            // disjoint spans.
            if a.start >= b.start || a.span().overlaps(&b.span()) {
                continue;
            }
            let extent = b.end - a.start;
            if extent > window {
                continue;
            }
            let offset = window_start(a.start, b.end, win_len, doc_len);
            let window_tokens = &doc.tokens[offset..offset + win_len];

            let mut x = Vec::with_capacity(win_len + 2);
            x.push(CLS);
            x.extend(window_tokens.iter().map(|t| vocab.id(t)));
            x.push(SEP);

            let shift = 1isize - offset as isize;
            out.push(RelationStatement {
                x,
                s1: a.span().shifted(shift),
                s2: b.span().shifted(shift),
                e1: a.entity_id.clone(),
                e2: b.entity_id.clone(),
                source: Provenance {
                    doc_id: doc.doc_id.clone(),
                    offset,
                },
            });
        }
    }
    out.sort_by(|p, q| {
        (p.source.offset, p.s1.start, p.s2.start, &p.e1, &p.e2).cmp(&(
            q.source.offset,
            q.s1.start,
            q.s2.start,
            &q.e1,
            &q.e2,
        ))
    });
    out
}

/// Extract from many documents; output order is ascending by document, then
/// the within-document order of [`extract_statements`].
pub fn extract_all(
    docs: &[Document],
    vocab: &Vocabulary,
    window: usize,
) -> Vec<RelationStatement> {
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    sorted
        .into_iter()
        .flat_map(|d| extract_statements(d, vocab, window))
        .collect()
}

/// Cap the number of retained statements per entity id using per-entity
/// reservoir sampling over the stream. A statement survives only if every
/// entity it mentions selected it, so each entity ends with at most `cap`
/// statements. Deterministic given seed and input order.
pub fn cap_by_entity(
    statements: Vec<RelationStatement>,
    cap: usize,
    seed: u64,
) -> Vec<RelationStatement> {
    assert!(cap >= 1, "cap must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // entity -> (seen count, reservoir of statement indices)
    let mut reservoirs: HashMap<String, (usize, Vec<usize>)> = HashMap::new();

    for (idx, st) in statements.iter().enumerate() {
        let mut entities: Vec<&str> = vec![st.e1.as_str()];
        if st.e2 != st.e1 {
            entities.push(st.e2.as_str());
        }
        for entity in entities {
            let slot = reservoirs
                .entry(entity.to_string())
                .or_insert_with(|| (0, Vec::new()));
            slot.0 += 1;
            if slot.1.len() < cap {
                slot.1.push(idx);
            } else {
                let j = rng.gen_range(0..slot.0);
                if j < cap {
                    slot.1[j] = idx;
                }
            }
        }
    }

    statements
        .into_iter()
        .enumerate()
        .filter(|(idx, st)| {
            let keep1 = reservoirs[&st.e1].1.contains(idx);
            let keep2 = st.e2 == st.e1 || reservoirs[&st.e2].1.contains(idx);
            keep1 && keep2
        })
        .map(|(_, st)| st)
        .collect()
}
