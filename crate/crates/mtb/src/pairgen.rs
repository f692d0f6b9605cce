//! Blank substitution and training-pair generation.
//!
//! Two statements form a positive pair exactly when they agree on both
//! entity slots; hard negatives share exactly one slot. Entity mentions are
//! independently replaced by a single `[BLANK]` token with probability
//! `1 - alpha`, so only about `alpha^2` of emitted statement sides name both
//! entities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

use crate::corpus::{RelationStatement, Span};
use crate::error::{Error, Result};
use crate::tokens::{TokenId, BLANK};

/// A statement whose entity spans may have been replaced by `[BLANK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlankedStatement {
    pub base: RelationStatement,
    pub blank1: bool,
    pub blank2: bool,
    /// Token ids after substitution.
    pub x: Vec<TokenId>,
    /// Span 1 re-indexed into `x`; length 1 if blanked.
    pub s1: Span,
    /// Span 2 re-indexed into `x`; length 1 if blanked.
    pub s2: Span,
}

impl BlankedStatement {
    /// A no-op blanking wrapper around a raw statement.
    pub fn intact(base: RelationStatement) -> Self {
        let (x, s1, s2) = (base.x.clone(), base.s1, base.s2);
        BlankedStatement {
            base,
            blank1: false,
            blank2: false,
            x,
            s1,
            s2,
        }
    }

    /// Reconstructs the original token ids by undoing the substitutions.
    /// Used by validity checks; must equal `base.x` exactly.
    pub fn restore(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.base.x.len());
        out.extend_from_slice(&self.x[..self.s1.start]);
        if self.blank1 {
            out.extend_from_slice(&self.base.x[self.base.s1.start..self.base.s1.end]);
        } else {
            out.extend_from_slice(&self.x[self.s1.start..self.s1.end]);
        }
        out.extend_from_slice(&self.x[self.s1.end..self.s2.start]);
        if self.blank2 {
            out.extend_from_slice(&self.base.x[self.base.s2.start..self.base.s2.end]);
        } else {
            out.extend_from_slice(&self.x[self.s2.start..self.s2.end]);
        }
        out.extend_from_slice(&self.x[self.s2.end..]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Positive,
    HardNegative,
    UniformNegative,
}

/// Two possibly-blanked statements with the same-pair label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatementPair {
    pub a: BlankedStatement,
    pub b: BlankedStatement,
    pub label: u8,
    pub kind: PairKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairGenConfig {
    /// Probability that a span is kept (not blanked).
    pub alpha: f64,
    /// Fraction of emitted pairs that are positive.
    pub pos_fraction: f64,
    /// Fraction of negatives drawn from the single-shared-entity pool.
    pub hard_fraction: f64,
    pub seed: u64,
    pub max_pairs: usize,
    /// Forbid pairing two statements from the same document.
    pub exclude_same_doc: bool,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            alpha: 0.7,
            pos_fraction: 0.5,
            hard_fraction: 1.0,
            seed: 0,
            max_pairs: 10_000,
            exclude_same_doc: false,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha)
            || !unit.contains(&self.pos_fraction)
            || !unit.contains(&self.hard_fraction)
        {
            return Err(Error::Config(
                "alpha, pos_fraction, hard_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Blank each span independently with probability `1 - alpha`. Consumes
/// exactly two rng draws, s1 first.
pub fn blank(statement: &RelationStatement, alpha: f64, rng: &mut impl Rng) -> BlankedStatement {
    let keep1 = rng.gen::<f64>() < alpha;
    let keep2 = rng.gen::<f64>() < alpha;

    let mut x = Vec::with_capacity(statement.x.len());
    x.extend_from_slice(&statement.x[..statement.s1.start]);
    let s1_start = statement.s1.start;
    if keep1 {
        x.extend_from_slice(&statement.x[statement.s1.start..statement.s1.end]);
    } else {
        x.push(BLANK);
    }
    let s1_end = x.len();
    x.extend_from_slice(&statement.x[statement.s1.end..statement.s2.start]);
    let s2_start = x.len();
    if keep2 {
        x.extend_from_slice(&statement.x[statement.s2.start..statement.s2.end]);
    } else {
        x.push(BLANK);
    }
    let s2_end = x.len();
    x.extend_from_slice(&statement.x[statement.s2.end..]);

    BlankedStatement {
        base: statement.clone(),
        blank1: !keep1,
        blank2: !keep2,
        x,
        s1: Span::new(s1_start, s1_end),
        s2: Span::new(s2_start, s2_end),
    }
}

/// Entity-pair and per-slot indexes over a statement list.
#[derive(Debug, Default)]
pub struct PairIndex {
    /// Ordered (e1, e2) -> statement indices.
    pub by_pair: BTreeMap<(String, String), Vec<usize>>,
    /// e1 slot -> statement indices.
    pub by_e1: BTreeMap<String, Vec<usize>>,
    /// e2 slot -> statement indices.
    pub by_e2: BTreeMap<String, Vec<usize>>,
}

pub fn index_by_pair(statements: &[RelationStatement]) -> PairIndex {
    let mut index = PairIndex::default();
    for (i, st) in statements.iter().enumerate() {
        index.by_pair.entry(st.pair_key()).or_default().push(i);
        index.by_e1.entry(st.e1.clone()).or_default().push(i);
        index.by_e2.entry(st.e2.clone()).or_default().push(i);
    }
    index
}

impl PairIndex {
    /// Statement indices matching `statements[id]` on exactly one slot.
    pub fn hard_candidates(&self, statements: &[RelationStatement], id: usize) -> Vec<usize> {
        let st = &statements[id];
        let e1_matches: HashSet<usize> = self
            .by_e1
            .get(&st.e1)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_default();
        let e2_matches: HashSet<usize> = self
            .by_e2
            .get(&st.e2)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_default();
        let mut out: Vec<usize> = e1_matches
            .symmetric_difference(&e2_matches)
            .copied()
            .collect();
        out.sort_unstable();
        out
    }
}

/// The pair label dictated by the slot-wise entity deltas.
pub fn pair_label(a: &RelationStatement, b: &RelationStatement) -> u8 {
    u8::from(a.e1 == b.e1 && a.e2 == b.e2)
}

fn is_hard(a: &RelationStatement, b: &RelationStatement) -> bool {
    (a.e1 == b.e1) != (a.e2 == b.e2)
}

const SAMPLE_RETRIES: usize = 10_000;

/// Generate up to `max_pairs` blanked statement pairs. Positives are drawn
/// uniformly (with replacement) from all unordered id pairs sharing both
/// slots; negatives split `hard_fraction : 1 - hard_fraction` between
/// single-shared-entity pairs and uniform non-matching pairs. Positive and
/// hard quotas are met exactly via deterministic scheduling, and the whole
/// stream is a pure function of `config.seed`.
pub fn generate_pairs(
    statements: &[RelationStatement],
    config: &PairGenConfig,
) -> Result<Vec<StatementPair>> {
    config.validate()?;
    if statements.len() < 2 {
        return Err(Error::Config(
            "pair generation needs at least 2 statements".into(),
        ));
    }
    let index = index_by_pair(statements);

    let same_doc = |a: usize, b: usize| statements[a].source.doc_id == statements[b].source.doc_id;

    let mut positives: Vec<(usize, usize)> = Vec::new();
    for ids in index.by_pair.values() {
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                if config.exclude_same_doc && same_doc(a, b) {
                    continue;
                }
                positives.push((a, b));
            }
        }
    }
    if config.pos_fraction > 0.0 && config.max_pairs > 0 && positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }

    let hard_candidates: Vec<Vec<usize>> = (0..statements.len())
        .map(|i| {
            let mut cands = index.hard_candidates(statements, i);
            if config.exclude_same_doc {
                cands.retain(|&b| !same_doc(i, b));
            }
            cands
        })
        .collect();
    let any_hard = hard_candidates.iter().any(|c| !c.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.max_pairs);
    let mut emitted_pos = 0usize;
    let mut emitted_neg = 0usize;
    let mut emitted_hard = 0usize;

    for i in 0..config.max_pairs {
        let want_pos = (emitted_pos as f64) < config.pos_fraction * ((i + 1) as f64);
        let (a, b, kind) = if want_pos {
            emitted_pos += 1;
            let (a, b) = positives[rng.gen_range(0..positives.len())];
            (a, b, PairKind::Positive)
        } else {
            emitted_neg += 1;
            let want_hard =
                any_hard && (emitted_hard as f64) < config.hard_fraction * (emitted_neg as f64);
            if want_hard {
                emitted_hard += 1;
                let mut picked = None;
                for _ in 0..SAMPLE_RETRIES {
                    let a = rng.gen_range(0..statements.len());
                    if hard_candidates[a].is_empty() {
                        continue;
                    }
                    let b = hard_candidates[a][rng.gen_range(0..hard_candidates[a].len())];
                    picked = Some((a, b));
                    break;
                }
                match picked {
                    Some((a, b)) => {
                        debug_assert!(is_hard(&statements[a], &statements[b]));
                        (a, b, PairKind::HardNegative)
                    }
                    None => break,
                }
            } else {
                let mut picked = None;
                for _ in 0..SAMPLE_RETRIES {
                    let a = rng.gen_range(0..statements.len());
                    let b = rng.gen_range(0..statements.len());
                    if a == b
                        || pair_label(&statements[a], &statements[b]) == 1
                        || (config.exclude_same_doc && same_doc(a, b))
                    {
                        continue;
                    }
                    picked = Some((a, b));
                    break;
                }
                match picked {
                    Some((a, b)) => (a, b, PairKind::UniformNegative),
                    None => break,
                }
            }
        };

        let blanked_a = blank(&statements[a], config.alpha, &mut rng);
        let blanked_b = blank(&statements[b], config.alpha, &mut rng);
        let label = pair_label(&statements[a], &statements[b]);
        out.push(StatementPair {
            a: blanked_a,
            b: blanked_b,
            label,
            kind,
        });
    }
    Ok(out)
}

/// Serialized form of one pair side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSideRecord {
    pub x: Vec<TokenId>,
    pub s1: Span,
    pub s2: Span,
    pub e1: String,
    pub e2: String,
    pub blank1: bool,
    pub blank2: bool,
    pub doc_id: String,
}

/// Serialized form of a [`StatementPair`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: PairSideRecord,
    pub b: PairSideRecord,
    pub label: u8,
    pub kind: PairKind,
}

impl From<&BlankedStatement> for PairSideRecord {
    fn from(side: &BlankedStatement) -> Self {
        PairSideRecord {
            x: side.x.clone(),
            s1: side.s1,
            s2: side.s2,
            e1: side.base.e1.clone(),
            e2: side.base.e2.clone(),
            blank1: side.blank1,
            blank2: side.blank2,
            doc_id: side.base.source.doc_id.clone(),
        }
    }
}

impl From<&StatementPair> for PairRecord {
    fn from(pair: &StatementPair) -> Self {
        PairRecord {
            a: (&pair.a).into(),
            b: (&pair.b).into(),
            label: pair.label,
            kind: pair.kind,
        }
    }
}
