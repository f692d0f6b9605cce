//! Scoring-path contracts of the evaluator: K=1 reduction to plain argmax,
//! the tie rule on degenerate representations, and sweep grid-point
//! equivalences.

use mtb::corpus::Span;
use mtb::encoder::{
    encode, relation_rep, EncoderConfig, EncoderModel, EncoderParams, InputVariant, OutputVariant,
    PostLayer,
};
use mtb::evaluation::{
    ablation_sweep, build_episodes, encode_labeled, evaluate_fewshot, evaluate_supervised,
    subsample_per_type, to_supervised_examples, Aggregation, LabeledStatement, RelationMap,
    SweepSpec,
};
use mtb::objectives::{argmax_tie_lowest, ClassifierHead};
use mtb::tokens::{build_vocab, Vocabulary};
use mtb::training::{
    mix_seed, train, MlmMode, OptimizerConfig, TrainConfig, TrainData, TrainMode,
};

fn labeled_pool(types: usize, per_type: usize) -> Vec<LabeledStatement> {
    (0..types)
        .flat_map(|t| {
            (0..per_type).map(move |i| LabeledStatement {
                tokens: vec![
                    format!("e{i}"),
                    format!("kw{t}"),
                    "the".into(),
                    format!("kv{t}"),
                    format!("f{i}"),
                ],
                s1: Span::new(0, 1),
                s2: Span::new(4, 5),
                relation: format!("rel{t}"),
                doc_id: None,
                template: None,
            })
        })
        .collect()
}

fn vocab_for(pool: &[LabeledStatement]) -> Vocabulary {
    build_vocab(pool.iter().flat_map(|p| p.tokens.iter()), 1).unwrap()
}

fn small_config(vocab_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        max_len: 24,
        input_variant: InputVariant::EntityMarkers,
        output_variant: OutputVariant::EntityStart,
        post_layer: PostLayer::LinearDense,
        vocab_size,
        seed,
    }
}

#[test]
fn one_shot_evaluation_reduces_to_argmax_over_dot_products() {
    let pool = labeled_pool(5, 3);
    let vocab = vocab_for(&pool);
    let model = EncoderModel::new(small_config(vocab.len(), 4)).unwrap();
    let episodes = build_episodes(&pool, 5, 1, 40, 8).unwrap();

    let rep = |st: &LabeledStatement| {
        let input = encode_labeled(st, &vocab, &model.config).unwrap();
        let h = encode(&model, &input).unwrap();
        relation_rep(&model, &input, &h).unwrap().0
    };

    // Manual oracle: N plain dot products, argmax with lowest-index ties.
    let mut manual_correct = 0usize;
    for ep in &episodes {
        let q = rep(&ep.query);
        let scores: Vec<f64> = ep.support.iter().map(|s| q.dot(&rep(&s[0]))).collect();
        if argmax_tie_lowest(&scores) == ep.true_class {
            manual_correct += 1;
        }
    }
    let report = evaluate_fewshot(&model, &vocab, &episodes, Aggregation::Max).unwrap();
    assert_eq!(report.accuracy, manual_correct as f64 / episodes.len() as f64);
}

#[test]
fn constant_representations_hit_the_tie_rule_and_chance() {
    let pool = labeled_pool(5, 4);
    let vocab = vocab_for(&pool);
    // All-zero parameters force identical (zero) representations for every
    // statement, so every episode is a pure tie and slot 0 wins.
    let config = small_config(vocab.len(), 0);
    let model = EncoderModel {
        params: EncoderParams::zeros(&config),
        config,
    };

    let episodes = build_episodes(&pool, 5, 1, 2_000, 13).unwrap();
    let expected = episodes.iter().filter(|e| e.true_class == 0).count() as f64
        / episodes.len() as f64;
    let report = evaluate_fewshot(&model, &vocab, &episodes, Aggregation::Max).unwrap();
    assert_eq!(report.accuracy, expected);

    // The true class is uniform over slots, so this sits at 1/N up to
    // binomial noise (3 sigma at n = 2000 is ~0.027).
    assert!((report.accuracy - 0.2).abs() < 0.03, "{}", report.accuracy);
}

#[test]
fn sweep_grid_points_match_their_direct_equivalents() {
    let pool = labeled_pool(4, 12);
    let vocab = vocab_for(&pool);
    let init = EncoderModel::new(small_config(vocab.len(), 6)).unwrap();
    let relations = RelationMap::from_labeled(&pool);
    let tune = TrainConfig {
        mode: TrainMode::SupervisedFinetune,
        optimizer: OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        batch_size: 8,
        steps: 12,
        seed: 3,
        lambda_mlm: 0.0,
        mask_prob: 0.15,
        mlm_mode: MlmMode::Summed,
        checkpoint_every: 0,
        log_every: 100,
        warmup_steps: 0,
        n_way: 4,
        k_shot: 1,
    };
    let seed = 9u64;
    let rows = ablation_sweep(&SweepSpec {
        init: &init,
        vocab: &vocab,
        train_set: &pool,
        eval_set: &pool,
        relations: &relations,
        grid: &[0, 50],
        tune: tune.clone(),
        fewshot: (4, 1, 60),
        seed,
    })
    .unwrap();

    // Point 0 equals a direct few-shot evaluation of the untuned model.
    let episodes = build_episodes(&pool, 4, 1, 60, mix_seed(seed, &[0])).unwrap();
    let direct = evaluate_fewshot(&init, &vocab, &episodes, Aggregation::Max).unwrap();
    assert_eq!(rows[0].examples_per_type, 0);
    assert_eq!(rows[0].accuracy, direct.accuracy);

    // A grid point covering the full data equals plain fine-tuning.
    let subset = subsample_per_type(&pool, 50, mix_seed(seed, &[50]));
    assert_eq!(subset.len(), pool.len());
    let examples = to_supervised_examples(&subset, &vocab, &relations, &init.config).unwrap();
    let head = ClassifierHead::new(
        relations.len(),
        init.config.rep_dim(),
        relations.nil_index(),
        mix_seed(seed, &[99, 50]),
    );
    let outcome = train(
        init.clone(),
        Some(head),
        TrainData::Supervised(&examples),
        &tune,
        None,
    )
    .unwrap();
    let direct_full = evaluate_supervised(
        &outcome.model,
        outcome.head.as_ref().unwrap(),
        &vocab,
        &pool,
        &relations,
    )
    .unwrap();
    assert_eq!(rows[1].examples_per_type, 50);
    assert_eq!(rows[1].accuracy, direct_full.accuracy);
}
