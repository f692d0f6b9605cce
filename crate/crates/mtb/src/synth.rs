//! Templated synthetic corpus generator: the acceptance-test stand-in for
//! an entity-linked web corpus.
//!
//! Every document holds one sentence instantiating a relation-specific
//! template over an entity pair. Templates of the same relation share two
//! relation keywords but differ in arrangement, so the latent relation of a
//! statement is always recoverable from its surface form, while entity
//! mentions vary freely. An optional distractor mention gives the corpus
//! mention pairs that express no relation, which is what makes span-aware
//! encoders distinguishable from bag-of-tokens ones.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::corpus::{Document, Mention, Span};
use crate::error::{Error, Result};
use crate::evaluation::{LabeledStatement, NIL_RELATION};
use crate::training::mix_seed;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_relations: usize,
    pub templates_per_relation: usize,
    pub entities: usize,
    pub docs: usize,
    pub seed: u64,
    /// Probability of appending a third, unrelated entity mention.
    pub distractor_prob: f64,
    /// Ordered entity pairs sampled per relation; `None` picks a default
    /// compatible with `docs`.
    pub pairs_per_relation: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_relations: 12,
            templates_per_relation: 2,
            entities: 200,
            docs: 2_000,
            seed: 0,
            distractor_prob: 0.5,
            pairs_per_relation: None,
        }
    }
}

pub struct SynthOutput {
    pub documents: Vec<Document>,
    /// Gold sidecar: every ordered mention pair of every sentence, labeled
    /// with its relation name or `no_relation`.
    pub labeled: Vec<LabeledStatement>,
    /// All relation names, nil first.
    pub relations: Vec<String>,
}

const ENTITY_SYLLABLES: [&str; 12] = [
    "na", "mo", "ri", "ta", "ve", "lu", "ki", "so", "pa", "zen", "dol", "bur",
];
const KEYWORD_SYLLABLES: [&str; 12] = [
    "dra", "bel", "kor", "mun", "fes", "gil", "hax", "pol", "quin", "rew", "sab", "tor",
];
const FILLERS: [&str; 8] = ["the", "of", "was", "by", "in", "a", "with", "to"];

/// Spell a number with syllables from `table`; injective for a fixed table.
fn spell(mut value: usize, table: &[&str]) -> String {
    let base = table.len();
    let mut word = String::new();
    loop {
        word.push_str(table[value % base]);
        value /= base;
        if value == 0 {
            break;
        }
    }
    word
}

fn entity_name(index: usize) -> String {
    spell(index, &ENTITY_SYLLABLES)
}

fn keyword(index: usize) -> String {
    spell(index, &KEYWORD_SYLLABLES)
}

/// Token pattern for one template; `None` slots take entity surfaces.
#[derive(Debug, Clone)]
enum Piece {
    Slot1,
    Slot2,
    Word(String),
}

/// Arrangement shapes; `$A`/`$B` are the relation keywords. Slot 1 always
/// precedes slot 2 so extracted statements keep a deterministic direction.
const SHAPES: usize = 8;

fn template_pieces(relation: usize, template: usize) -> Vec<Piece> {
    let kw_a = keyword(2 * relation);
    let kw_b = keyword(2 * relation + 1);
    let w = |s: &str| Piece::Word(s.to_string());
    let a = || Piece::Word(kw_a.clone());
    let b = || Piece::Word(kw_b.clone());
    match (relation + 5 * template) % SHAPES {
        0 => vec![Piece::Slot1, a(), w("the"), b(), w("of"), Piece::Slot2],
        1 => vec![Piece::Slot1, w("was"), a(), b(), w("by"), Piece::Slot2],
        2 => vec![w("the"), a(), Piece::Slot1, w("to"), b(), Piece::Slot2],
        3 => vec![Piece::Slot1, w("a"), b(), w("with"), a(), Piece::Slot2],
        4 => vec![Piece::Slot1, b(), w("in"), w("the"), a(), Piece::Slot2],
        5 => vec![Piece::Slot1, w("of"), a(), w("a"), b(), w("to"), Piece::Slot2],
        6 => vec![w("a"), b(), Piece::Slot1, a(), w("by"), Piece::Slot2],
        _ => vec![Piece::Slot1, w("in"), a(), w("the"), b(), w("was"), Piece::Slot2],
    }
}

struct Sentence {
    relation: usize,
    template: usize,
    pair: (usize, usize),
    distractor: Option<usize>,
}

/// Generate the corpus. Deterministic in `config.seed`; every sampled
/// `(relation, entity pair)` combination is instantiated at least twice so
/// positives always exist.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthOutput> {
    let r = config.num_relations;
    if r < 2 {
        return Err(Error::Config("num_relations must be >= 2".into()));
    }
    if config.templates_per_relation == 0 || config.templates_per_relation > SHAPES {
        return Err(Error::Config(format!(
            "templates_per_relation must lie in 1..={SHAPES}"
        )));
    }
    if config.entities < 4 {
        return Err(Error::Config("need at least 4 entities".into()));
    }
    if !(0.0..=1.0).contains(&config.distractor_prob) {
        return Err(Error::Config("distractor_prob must lie in [0, 1]".into()));
    }

    let max_pairs = config.entities / 2;
    let default_pairs = (config.docs / (4 * r)).clamp(2, max_pairs.max(2));
    let pairs_per_relation = config
        .pairs_per_relation
        .unwrap_or(default_pairs)
        .min(max_pairs);
    if pairs_per_relation == 0 {
        return Err(Error::Config("pairs_per_relation resolved to 0".into()));
    }
    let floor = 2 * r * pairs_per_relation;
    if config.docs < floor {
        return Err(Error::Config(format!(
            "docs ({}) too few to give every (relation, pair) two statements; need >= {floor}",
            config.docs
        )));
    }

    // Entity pairs: disjoint within a relation (so hard negatives always
    // cross relations), overlapping across relations (so they exist).
    let mut pair_pool: Vec<Vec<(usize, usize)>> = Vec::with_capacity(r);
    for relation in 0..r {
        let mut ids: Vec<usize> = (0..config.entities).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[1, relation as u64]));
        ids.shuffle(&mut rng);
        pair_pool.push(
            (0..pairs_per_relation)
                .map(|p| (ids[2 * p], ids[2 * p + 1]))
                .collect(),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[2]));
    let mut sentences: Vec<Sentence> = Vec::with_capacity(config.docs);
    let emit = |relation: usize, pair_idx: usize, rng: &mut ChaCha8Rng| {
        let pair = pair_pool[relation][pair_idx];
        let template = rng.gen_range(0..config.templates_per_relation);
        let distractor = if rng.gen::<f64>() < config.distractor_prob {
            // Any entity other than the two in focus.
            loop {
                let d = rng.gen_range(0..config.entities);
                if d != pair.0 && d != pair.1 {
                    break Some(d);
                }
            }
        } else {
            None
        };
        Sentence {
            relation,
            template,
            pair,
            distractor,
        }
    };

    // Two guaranteed occurrences per (relation, pair), then uniform filler.
    for _ in 0..2 {
        for relation in 0..r {
            for pair_idx in 0..pairs_per_relation {
                let s = emit(relation, pair_idx, &mut rng);
                sentences.push(s);
            }
        }
    }
    while sentences.len() < config.docs {
        let relation = rng.gen_range(0..r);
        let pair_idx = rng.gen_range(0..pairs_per_relation);
        let s = emit(relation, pair_idx, &mut rng);
        sentences.push(s);
    }
    sentences.shuffle(&mut rng);

    let relation_name = |relation: usize| format!("rel{relation:02}");
    let mut documents = Vec::with_capacity(sentences.len());
    let mut labeled = Vec::new();
    for (idx, sentence) in sentences.iter().enumerate() {
        let doc_id = format!("d{idx:05}");
        let mut tokens: Vec<String> = Vec::new();
        let mut mentions: Vec<(Span, usize)> = Vec::new();

        let push_entity = |tokens: &mut Vec<String>, mentions: &mut Vec<(Span, usize)>, e: usize| {
            let start = tokens.len();
            tokens.push(entity_name(e));
            mentions.push((Span::new(start, tokens.len()), e));
        };

        for piece in template_pieces(sentence.relation, sentence.template) {
            match piece {
                Piece::Slot1 => push_entity(&mut tokens, &mut mentions, sentence.pair.0),
                Piece::Slot2 => push_entity(&mut tokens, &mut mentions, sentence.pair.1),
                Piece::Word(word) => tokens.push(word),
            }
        }
        if let Some(d) = sentence.distractor {
            tokens.push(FILLERS[7].to_string()); // "to"
            push_entity(&mut tokens, &mut mentions, d);
        }
        tokens.push(".".to_string());

        let document = Document::new(
            doc_id.clone(),
            tokens.clone(),
            mentions
                .iter()
                .map(|(span, e)| Mention {
                    start: span.start,
                    end: span.end,
                    entity_id: format!("e{e:03}"),
                })
                .collect(),
        )?;
        documents.push(document);

        // Gold labels for every ordered mention pair of the sentence.
        for i in 0..mentions.len() {
            for j in (i + 1)..mentions.len() {
                let is_template_pair = i == 0 && j == 1;
                labeled.push(LabeledStatement {
                    tokens: tokens.clone(),
                    s1: mentions[i].0,
                    s2: mentions[j].0,
                    relation: if is_template_pair {
                        relation_name(sentence.relation)
                    } else {
                        NIL_RELATION.to_string()
                    },
                    doc_id: Some(doc_id.clone()),
                    template: Some(sentence.relation * SHAPES + sentence.template),
                });
            }
        }
    }

    let mut relations = vec![NIL_RELATION.to_string()];
    relations.extend((0..r).map(relation_name));

    Ok(SynthOutput {
        documents,
        labeled,
        relations,
    })
}

/// Map each document id to the relation name of its template pair.
pub fn doc_relations(labeled: &[LabeledStatement]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for st in labeled {
        if st.relation != NIL_RELATION {
            if let Some(doc_id) = &st.doc_id {
                out.insert(doc_id.clone(), st.relation.clone());
            }
        }
    }
    out
}
