//! Few-shot episode construction and scoring, supervised metrics, and the
//! data-ablation sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::Span;
use crate::encoder::{
    build_input, encode, relation_rep, EncodedInput, EncoderConfig, EncoderModel,
};
use crate::error::{Error, Result};
use crate::objectives::{argmax_tie_lowest, ClassifierHead};
use crate::tokens::{Vocabulary, CLS, SEP};
use crate::training::{mix_seed, TrainConfig};

/// One labeled relation example in the external JSONL format:
/// `{tokens, s1, s2, relation}` plus optional provenance fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStatement {
    pub tokens: Vec<String>,
    pub s1: Span,
    pub s2: Span,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<usize>,
}

/// Wrap a labeled statement in `[CLS]`/`[SEP]`, map tokens to ids, and build
/// the encoder input for the model's variant.
pub fn encode_labeled(
    statement: &LabeledStatement,
    vocab: &Vocabulary,
    config: &EncoderConfig,
) -> Result<EncodedInput> {
    let mut ids = Vec::with_capacity(statement.tokens.len() + 2);
    ids.push(CLS);
    ids.extend(statement.tokens.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    build_input(
        &ids,
        statement.s1.shifted(1),
        statement.s2.shifted(1),
        config.input_variant,
        config.max_len,
    )
}

/// The name used for the nil ("no relation") class.
pub const NIL_RELATION: &str = "no_relation";

/// Relation-name <-> class-id mapping. Ids are line numbers in the mapping
/// file; the nil class is recognized by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMap {
    names: Vec<String>,
}

impl RelationMap {
    pub fn new(names: Vec<String>) -> Self {
        RelationMap { names }
    }

    /// Deterministic map from the labels present in a dataset: nil first if
    /// present, the rest sorted.
    pub fn from_labeled(labeled: &[LabeledStatement]) -> Self {
        let mut names: Vec<String> = labeled
            .iter()
            .map(|l| l.relation.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(pos) = names.iter().position(|n| n == NIL_RELATION) {
            let nil = names.remove(pos);
            names.insert(0, nil);
        }
        RelationMap { names }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn nil_index(&self) -> Option<usize> {
        self.names.iter().position(|n| n == NIL_RELATION)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.names.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if names.is_empty() {
            return Err(Error::Config("empty relation mapping file".into()));
        }
        Ok(RelationMap { names })
    }
}

/// One N-way-K-shot evaluation instance.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// `n_way` support sets of `k_shot` statements each.
    pub support: Vec<Vec<LabeledStatement>>,
    pub query: LabeledStatement,
    pub true_class: usize,
}

/// Sample `count` episodes. Every relation type in the pool must have at
/// least `k_shot + 1` examples; sampling inside an episode is without
/// replacement, so a query never appears in its own support set.
pub fn build_episodes(
    pool: &[LabeledStatement],
    n_way: usize,
    k_shot: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, st) in pool.iter().enumerate() {
        by_type.entry(st.relation.as_str()).or_default().push(i);
    }
    if by_type.len() < n_way {
        return Err(Error::InsufficientTypes {
            have: by_type.len(),
            need: n_way,
        });
    }
    for (name, ids) in &by_type {
        if ids.len() < k_shot + 1 {
            return Err(Error::InsufficientExamples {
                relation: name.to_string(),
                have: ids.len(),
                need: k_shot + 1,
            });
        }
    }

    let type_names: Vec<&str> = by_type.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let mut picked_types = type_names.clone();
        picked_types.shuffle(&mut rng);
        picked_types.truncate(n_way);
        let true_class = rng.gen_range(0..n_way);

        let mut support = Vec::with_capacity(n_way);
        let mut query = None;
        for (slot, name) in picked_types.iter().enumerate() {
            let mut ids = by_type[name].clone();
            ids.shuffle(&mut rng);
            if slot == true_class {
                query = Some(pool[ids[k_shot]].clone());
            }
            support.push(ids[..k_shot].iter().map(|&i| pool[i].clone()).collect());
        }
        episodes.push(Episode {
            n_way,
            k_shot,
            support,
            query: query.expect("true class slot visited"),
            true_class,
        });
    }
    Ok(episodes)
}

/// How K > 1 support scores are combined into a class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Micro-averaged precision/recall/F1 over all classes except `nil`.
pub fn micro_f1(gold: &[usize], pred: &[usize], nil: Option<usize>) -> F1Scores {
    assert_eq!(gold.len(), pred.len());
    let is_nil = |c: usize| Some(c) == nil;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        if !is_nil(p) {
            if p == g {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if !is_nil(g) && p != g {
            fn_ += 1;
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Scores {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n: usize,
    pub accuracy: f64,
    /// 95% normal-approximation binomial interval on the accuracy.
    pub interval95: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro: Option<F1Scores>,
    pub per_class: Vec<ClassBreakdown>,
    pub confusion: Vec<Vec<usize>>,
    pub config_echo: serde_json::Value,
}

pub fn binomial_interval(p_hat: f64, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let half = z * (p_hat * (1.0 - p_hat) / n as f64).sqrt();
    ((p_hat - half).max(0.0), (p_hat + half).min(1.0))
}

fn rep_for(
    model: &EncoderModel,
    vocab: &Vocabulary,
    statement: &LabeledStatement,
) -> Result<ndarray::Array1<f64>> {
    let input = encode_labeled(statement, vocab, &model.config)?;
    let h = encode(model, &input)?;
    Ok(relation_rep(model, &input, &h)?.0)
}

/// Score episodes by inner product between the query representation and
/// each class's supports. Reports accuracy with a 95% interval and the
/// episode-slot confusion matrix.
pub fn evaluate_fewshot(
    model: &EncoderModel,
    vocab: &Vocabulary,
    episodes: &[Episode],
    aggregation: Aggregation,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to evaluate".into()));
    }
    let n_way = episodes[0].n_way;
    let outcomes: Vec<Result<(usize, usize)>> = episodes
        .par_iter()
        .map(|ep| {
            let q = rep_for(model, vocab, &ep.query)?;
            let mut scores = Vec::with_capacity(ep.support.len());
            for class_support in &ep.support {
                let mut per_support = Vec::with_capacity(class_support.len());
                for s in class_support {
                    per_support.push(q.dot(&rep_for(model, vocab, s)?));
                }
                let score = match aggregation {
                    Aggregation::Max => {
                        per_support.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    }
                    Aggregation::Mean => {
                        per_support.iter().sum::<f64>() / per_support.len() as f64
                    }
                };
                scores.push(score);
            }
            Ok((ep.true_class, argmax_tie_lowest(&scores)))
        })
        .collect();

    let mut confusion = vec![vec![0usize; n_way]; n_way];
    let mut correct = 0usize;
    let mut n = 0usize;
    for outcome in outcomes {
        let (gold, pred) = outcome?;
        confusion[gold][pred] += 1;
        if gold == pred {
            correct += 1;
        }
        n += 1;
    }
    let accuracy = correct as f64 / n as f64;
    let per_class = (0..n_way)
        .map(|c| ClassBreakdown {
            class: format!("slot_{c}"),
            gold: confusion[c].iter().sum(),
            predicted: confusion.iter().map(|row| row[c]).sum(),
            correct: confusion[c][c],
        })
        .collect();
    Ok(EvalReport {
        task: "fewshot".into(),
        n,
        accuracy,
        interval95: binomial_interval(accuracy, n, 1.96),
        micro: None,
        per_class,
        confusion,
        config_echo: serde_json::json!({
            "n_way": n_way,
            "k_shot": episodes[0].k_shot,
            "aggregation": aggregation,
        }),
    })
}

/// Classify each labeled statement with the head and report accuracy plus
/// micro-F1 excluding the nil class.
pub fn evaluate_supervised(
    model: &EncoderModel,
    head: &ClassifierHead,
    vocab: &Vocabulary,
    labeled: &[LabeledStatement],
    relations: &RelationMap,
) -> Result<EvalReport> {
    if labeled.is_empty() {
        return Err(Error::Config("no labeled statements to evaluate".into()));
    }
    let k = head.num_classes();
    if k != relations.len() {
        return Err(Error::Config(format!(
            "head has {k} classes but the relation map has {}",
            relations.len()
        )));
    }
    let outcomes: Vec<Result<(usize, usize)>> = labeled
        .par_iter()
        .map(|st| {
            let gold = relations.id(&st.relation)?;
            let rep = rep_for(model, vocab, st)?;
            let logits = head.logits(&rep);
            let pred = argmax_tie_lowest(logits.as_slice().unwrap());
            Ok((gold, pred))
        })
        .collect();

    let mut confusion = vec![vec![0usize; k]; k];
    let mut gold_ids = Vec::with_capacity(labeled.len());
    let mut pred_ids = Vec::with_capacity(labeled.len());
    let mut correct = 0usize;
    for outcome in outcomes {
        let (gold, pred) = outcome?;
        confusion[gold][pred] += 1;
        if gold == pred {
            correct += 1;
        }
        gold_ids.push(gold);
        pred_ids.push(pred);
    }
    let n = gold_ids.len();
    let accuracy = correct as f64 / n as f64;
    let micro = micro_f1(&gold_ids, &pred_ids, head.nil_index);
    let per_class = (0..k)
        .map(|c| ClassBreakdown {
            class: relations.name(c).to_string(),
            gold: confusion[c].iter().sum(),
            predicted: confusion.iter().map(|row| row[c]).sum(),
            correct: confusion[c][c],
        })
        .collect();
    Ok(EvalReport {
        task: "supervised".into(),
        n,
        accuracy,
        interval95: binomial_interval(accuracy, n, 1.96),
        micro: Some(micro),
        per_class,
        confusion,
        config_echo: serde_json::json!({
            "classes": relations.names(),
            "nil_index": head.nil_index,
        }),
    })
}

/// Convert labeled statements to supervised training examples.
pub fn to_supervised_examples(
    labeled: &[LabeledStatement],
    vocab: &Vocabulary,
    relations: &RelationMap,
    config: &EncoderConfig,
) -> Result<Vec<(EncodedInput, usize)>> {
    labeled
        .iter()
        .map(|st| {
            Ok((
                encode_labeled(st, vocab, config)?,
                relations.id(&st.relation)?,
            ))
        })
        .collect()
}

/// Group non-nil labeled statements into per-class encoder inputs for
/// few-shot fine-tuning.
pub fn to_fewshot_classes(
    labeled: &[LabeledStatement],
    vocab: &Vocabulary,
    config: &EncoderConfig,
) -> Result<Vec<Vec<EncodedInput>>> {
    let mut by_type: BTreeMap<&str, Vec<EncodedInput>> = BTreeMap::new();
    for st in labeled {
        if st.relation == NIL_RELATION {
            continue;
        }
        by_type
            .entry(st.relation.as_str())
            .or_default()
            .push(encode_labeled(st, vocab, config)?);
    }
    Ok(by_type.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub examples_per_type: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    pub skipped: bool,
}

pub struct SweepSpec<'a> {
    pub init: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub train_set: &'a [LabeledStatement],
    pub eval_set: &'a [LabeledStatement],
    pub relations: &'a RelationMap,
    /// Examples per relation type; 0 means "no fine-tuning", evaluated as
    /// task-agnostic few-shot matching.
    pub grid: &'a [usize],
    pub tune: TrainConfig,
    /// `(n_way, k_shot, episodes)` for the 0-annotation grid point.
    pub fewshot: (usize, usize, usize),
    pub seed: u64,
}

/// Seeded subsample of at most `per_type` examples per relation type.
pub fn subsample_per_type(
    labeled: &[LabeledStatement],
    per_type: usize,
    seed: u64,
) -> Vec<LabeledStatement> {
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, st) in labeled.iter().enumerate() {
        by_type.entry(st.relation.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::new();
    for ids in by_type.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        ids.truncate(per_type);
        keep.extend(ids);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| labeled[i].clone()).collect()
}

/// Fine-tune on seeded subsamples of increasing size and evaluate each
/// point. Grid point 0 is the untuned model evaluated by exemplar matching;
/// infeasible points are skipped with a warning row.
pub fn ablation_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(spec.grid.len());
    for &point in spec.grid {
        if point == 0 {
            let eval_pool: Vec<LabeledStatement> = spec
                .eval_set
                .iter()
                .filter(|st| st.relation != NIL_RELATION)
                .cloned()
                .collect();
            let (n_way, k_shot, count) = spec.fewshot;
            let episodes = build_episodes(
                &eval_pool,
                n_way,
                k_shot,
                count,
                mix_seed(spec.seed, &[0]),
            )?;
            let report = evaluate_fewshot(spec.init, spec.vocab, &episodes, Aggregation::Max)?;
            rows.push(SweepRow {
                examples_per_type: 0,
                accuracy: report.accuracy,
                micro_f1: None,
                skipped: false,
            });
            continue;
        }

        let subset = subsample_per_type(
            spec.train_set,
            point,
            mix_seed(spec.seed, &[point as u64]),
        );
        if subset.is_empty() {
            rows.push(SweepRow {
                examples_per_type: point,
                accuracy: 0.0,
                micro_f1: None,
                skipped: true,
            });
            continue;
        }
        let examples =
            to_supervised_examples(&subset, spec.vocab, spec.relations, &spec.init.config)?;
        let head = ClassifierHead::new(
            spec.relations.len(),
            spec.init.config.rep_dim(),
            spec.relations.nil_index(),
            mix_seed(spec.seed, &[99, point as u64]),
        );
        let outcome = crate::training::train(
            spec.init.clone(),
            Some(head),
            crate::training::TrainData::Supervised(&examples),
            &spec.tune,
            None,
        )?;
        let report = evaluate_supervised(
            &outcome.model,
            outcome.head.as_ref().expect("supervised head"),
            spec.vocab,
            spec.eval_set,
            spec.relations,
        )?;
        rows.push(SweepRow {
            examples_per_type: point,
            accuracy: report.accuracy,
            micro_f1: report.micro.as_ref().map(|m| m.f1),
            skipped: false,
        });
    }
    Ok(rows)
}
