//! Brute-force oracles for extraction and pair generation, run over random
//! corpora. The oracles enumerate exhaustively and independently of the
//! implementation under test.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use mtb::corpus::{extract_statements, Document, Mention, RelationStatement};
use mtb::pairgen::{generate_pairs, index_by_pair, PairGenConfig, PairKind};
use mtb::tokens::{build_vocab, Vocabulary};

fn random_document(rng: &mut ChaCha8Rng, id: usize) -> (Document, Vocabulary) {
    let len = rng.gen_range(4..60);
    let tokens: Vec<String> = (0..len).map(|i| format!("t{i}")).collect();
    let n_mentions = rng.gen_range(0..8);
    let mentions: Vec<Mention> = (0..n_mentions)
        .map(|_| {
            let start = rng.gen_range(0..len);
            let end = (start + rng.gen_range(1..4)).min(len);
            Mention {
                start,
                end,
                entity_id: format!("e{}", rng.gen_range(0..4)),
            }
        })
        .collect();
    let vocab = build_vocab(tokens.iter(), 1).unwrap();
    (
        Document::new(format!("d{id:03}"), tokens, mentions).unwrap(),
        vocab,
    )
}

/// Oracle: enumerate all mention pairs, apply the feasibility rules
/// directly, and return the sorted multiset of (spans, entities) that must
/// be emitted. Duplicate mention annotations yield duplicate statements.
fn brute_force_pairs(
    doc: &Document,
    window: usize,
) -> Vec<(usize, usize, usize, usize, String, String)> {
    let mut expected = Vec::new();
    for a in &doc.mentions {
        for b in &doc.mentions {
            let ordered = a.start < b.start;
            let disjoint = a.end <= b.start || b.end <= a.start;
            let fits = b.end.saturating_sub(a.start) <= window;
            if ordered && disjoint && fits {
                expected.push((
                    a.start,
                    a.end,
                    b.start,
                    b.end,
                    a.entity_id.clone(),
                    b.entity_id.clone(),
                ));
            }
        }
    }
    expected.sort();
    expected
}

#[test]
fn extraction_matches_brute_force_on_random_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (doc, vocab) = random_document(&mut rng, case);
        let window = rng.gen_range(2..50);
        let statements = extract_statements(&doc, &vocab, window);

        let expected = brute_force_pairs(&doc, window);
        let mut got: Vec<_> = statements
            .iter()
            .map(|st| {
                let offset = st.source.offset;
                (
                    st.s1.start - 1 + offset,
                    st.s1.end - 1 + offset,
                    st.s2.start - 1 + offset,
                    st.s2.end - 1 + offset,
                    st.e1.clone(),
                    st.e2.clone(),
                )
            })
            .collect();
        got.sort();
        assert_eq!(got, expected, "case {case} window {window}");

        for st in &statements {
            st.validate().unwrap();
            // Window content: tokens of x (minus wrappers) are the original
            // window slice.
            let offset = st.source.offset;
            let window_len = st.x.len() - 2;
            for (i, token) in doc.tokens[offset..offset + window_len].iter().enumerate() {
                assert_eq!(st.x[i + 1], vocab.id(token));
            }
        }
    }
}

fn random_statements(rng: &mut ChaCha8Rng, n: usize, entities: usize) -> Vec<RelationStatement> {
    (0..n)
        .map(|i| {
            let mut x = vec![mtb::tokens::CLS];
            x.extend((0..6).map(|_| rng.gen_range(10..40)));
            x.push(mtb::tokens::SEP);
            RelationStatement {
                x,
                s1: mtb::corpus::Span::new(1, 2),
                s2: mtb::corpus::Span::new(3, 5),
                e1: format!("E{}", rng.gen_range(0..entities)),
                e2: format!("F{}", rng.gen_range(0..entities)),
                source: mtb::corpus::Provenance {
                    doc_id: format!("d{i:03}"),
                    offset: 0,
                },
            }
        })
        .collect()
}

#[test]
fn generated_pairs_match_brute_force_candidate_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut corpora_with_positives = 0;
    for case in 0..100 {
        let n = rng.gen_range(2..50);
        let statements = random_statements(&mut rng, n, 4);

        // Brute-force candidate sets from the label definitions.
        let mut positive_set = BTreeSet::new();
        let mut hard_set = BTreeSet::new();
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let e1_match = statements[a].e1 == statements[b].e1;
                let e2_match = statements[a].e2 == statements[b].e2;
                if e1_match && e2_match {
                    positive_set.insert((a.min(b), a.max(b)));
                }
                if e1_match != e2_match {
                    hard_set.insert((a, b));
                }
            }
        }

        // The per-statement hard-candidate index must equal the oracle.
        let index = index_by_pair(&statements);
        for a in 0..n {
            let expected: Vec<usize> =
                (0..n).filter(|&b| hard_set.contains(&(a, b))).collect();
            assert_eq!(index.hard_candidates(&statements, a), expected, "case {case}");
        }

        let config = PairGenConfig {
            seed: case as u64,
            max_pairs: 300,
            pos_fraction: if positive_set.is_empty() { 0.0 } else { 0.5 },
            hard_fraction: 0.7,
            ..Default::default()
        };
        let pairs = generate_pairs(&statements, &config).unwrap();
        if !positive_set.is_empty() {
            corpora_with_positives += 1;
        }

        let find_id = |st: &RelationStatement| -> usize {
            statements
                .iter()
                .position(|s| s.source.doc_id == st.source.doc_id)
                .unwrap()
        };
        for pair in &pairs {
            let a = find_id(&pair.a.base);
            let b = find_id(&pair.b.base);
            assert_ne!(a, b, "identical statement ids paired");
            let expected_label =
                u8::from(statements[a].e1 == statements[b].e1 && statements[a].e2 == statements[b].e2);
            assert_eq!(pair.label, expected_label, "case {case}");
            match pair.kind {
                PairKind::Positive => {
                    assert!(positive_set.contains(&(a.min(b), a.max(b))), "case {case}");
                }
                PairKind::HardNegative => {
                    assert!(hard_set.contains(&(a, b)), "case {case}");
                }
                PairKind::UniformNegative => assert_eq!(pair.label, 0),
            }
        }
    }
    assert!(corpora_with_positives > 20, "oracle corpus generator too sparse");
}

#[test]
fn capping_is_a_subset_preserving_order_and_caps() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..50 {
        let n = rng.gen_range(1..80);
        let statements = random_statements(&mut rng, n, 3);
        let cap = rng.gen_range(1..10);
        let capped = mtb::corpus::cap_by_entity(statements.clone(), cap, 3);

        // Subset in original order.
        let mut cursor = 0;
        for st in &capped {
            let pos = statements[cursor..]
                .iter()
                .position(|s| s == st)
                .expect("capped output must be a subsequence");
            cursor += pos + 1;
        }
        // Per-entity counts respect the cap.
        let mut counts = std::collections::HashMap::new();
        for st in &capped {
            *counts.entry(st.e1.clone()).or_insert(0usize) += 1;
            if st.e2 != st.e1 {
                *counts.entry(st.e2.clone()).or_insert(0usize) += 1;
            }
        }
        for (entity, count) in counts {
            assert!(count <= cap, "entity {entity} exceeds cap: {count} > {cap}");
        }
    }
}
