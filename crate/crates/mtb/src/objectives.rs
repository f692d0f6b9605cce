//! Training objectives: the pairwise same-relation loss, the masked
//! language model auxiliary loss, supervised classification, and few-shot
//! similarity scoring.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::encoder::{EncodedInput, EncoderModel, EncoderParams, Mat};
use crate::error::{Error, Result};
use crate::tokens::{TokenId, RESERVED};

/// Dot products are clamped here before exponentiation.
pub const DOT_CLAMP: f64 = 30.0;

fn softplus(t: f64) -> f64 {
    if t > DOT_CLAMP {
        t
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability that two relation representations describe the same
/// relation: `sigma(h . h')`. Exactly symmetric in its arguments.
pub fn mtb_probability(h: &Array1<f64>, h_prime: &Array1<f64>) -> f64 {
    let dot = h.dot(h_prime).clamp(-DOT_CLAMP, DOT_CLAMP);
    sigmoid(dot)
}

/// One pair of representations with its same-relation label.
#[derive(Debug, Clone)]
pub struct MtbPairRep {
    pub h_a: Array1<f64>,
    pub h_b: Array1<f64>,
    pub label: u8,
}

/// Mean binary cross entropy over the batch, with gradients w.r.t. both
/// representations of every pair.
pub fn mtb_loss(batch: &[MtbPairRep]) -> (f64, Vec<(Array1<f64>, Array1<f64>)>) {
    assert!(!batch.is_empty(), "mtb_loss needs at least one pair");
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for pair in batch {
        let z = pair.h_a.dot(&pair.h_b).clamp(-DOT_CLAMP, DOT_CLAMP);
        let y = pair.label as f64;
        // -[y ln p + (1-y) ln(1-p)] in a form that never overflows.
        total += y * softplus(-z) + (1.0 - y) * softplus(z);
        let dz = (sigmoid(z) - y) / n;
        grads.push((&pair.h_b * dz, &pair.h_a * dz));
    }
    (total / n, grads)
}

/// An encoder input with some ids replaced for masked-token prediction.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    /// Input whose `ids` contain the replacements.
    pub input: EncodedInput,
    /// `(position, original id)` prediction targets.
    pub targets: Vec<(usize, TokenId)>,
}

fn maskable(id: TokenId) -> bool {
    id as usize >= RESERVED.len()
}

/// BERT-style masking: each maskable token is selected with `mask_prob`,
/// and a selected token becomes `[MASK]` 80% of the time, a random
/// non-reserved id 10%, and stays unchanged 10%. Reserved control tokens
/// (`[CLS]`, `[SEP]`, markers, `[BLANK]`, ...) are never targets. If the
/// draw selects nothing, one maskable position is forced so every batch has
/// at least one target.
pub fn mask_tokens(
    input: &EncodedInput,
    vocab_size: usize,
    mask_prob: f64,
    rng: &mut impl Rng,
) -> Result<MlmBatch> {
    let first_regular = RESERVED.len() as TokenId;
    let maskable_positions: Vec<usize> = input
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| maskable(id))
        .map(|(t, _)| t)
        .collect();
    if maskable_positions.is_empty() {
        return Err(Error::Config("input has no maskable tokens".into()));
    }

    let mut ids = input.ids.clone();
    let mut targets: Vec<(usize, TokenId)> = Vec::new();
    fn replace(
        ids: &mut [TokenId],
        targets: &mut Vec<(usize, TokenId)>,
        t: usize,
        first_regular: TokenId,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) {
        let original = ids[t];
        let r: f64 = rng.gen();
        if r < 0.8 {
            ids[t] = crate::tokens::MASK;
        } else if r < 0.9 && (vocab_size as TokenId) > first_regular {
            ids[t] = rng.gen_range(first_regular..vocab_size as TokenId);
        }
        targets.push((t, original));
    }

    for &t in &maskable_positions {
        if rng.gen::<f64>() < mask_prob {
            replace(&mut ids, &mut targets, t, first_regular, vocab_size, rng);
        }
    }
    if targets.is_empty() {
        let t = maskable_positions[rng.gen_range(0..maskable_positions.len())];
        replace(&mut ids, &mut targets, t, first_regular, vocab_size, rng);
    }

    Ok(MlmBatch {
        input: EncodedInput {
            ids,
            ..input.clone()
        },
        targets,
    })
}

fn vocab_softmax(model: &EncoderModel, h: &Mat, pos: usize) -> Array1<f64> {
    let row = h.row(pos);
    let mut logits = model.params.token_emb.dot(&row);
    logits += &model.params.mlm_bias.index_axis(Axis(0), 0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.mapv_inplace(|v| (v - max).exp());
    let sum = logits.sum();
    logits.mapv_inplace(|v| v / sum);
    logits
}

/// Sum of cross-entropies over the targets (softmax over the vocabulary,
/// output weights tied to the token embedding matrix).
pub fn mlm_loss_sum(model: &EncoderModel, h: &Mat, targets: &[(usize, TokenId)]) -> f64 {
    targets
        .iter()
        .map(|&(pos, orig)| {
            let probs = vocab_softmax(model, h, pos);
            -probs[orig as usize].max(f64::MIN_POSITIVE).ln()
        })
        .sum()
}

/// Same as [`mlm_loss_sum`] but also accumulates `scale` times the gradient
/// into `d_h`, the (tied) embedding gradient, and the output-bias gradient.
pub fn mlm_forward_backward(
    model: &EncoderModel,
    h: &Mat,
    targets: &[(usize, TokenId)],
    scale: f64,
    d_h: &mut Mat,
    grads: &mut EncoderParams,
) -> f64 {
    let mut total = 0.0;
    for &(pos, orig) in targets {
        let mut dlogits = vocab_softmax(model, h, pos);
        total -= dlogits[orig as usize].max(f64::MIN_POSITIVE).ln();
        dlogits[orig as usize] -= 1.0;
        dlogits *= scale;

        let d_row = model.params.token_emb.t().dot(&dlogits);
        d_h.row_mut(pos).scaled_add(1.0, &d_row);
        let h_row = h.row(pos);
        for (v, &dl) in dlogits.iter().enumerate() {
            if dl != 0.0 {
                grads.token_emb.row_mut(v).scaled_add(dl, &h_row);
            }
        }
        grads
            .mlm_bias
            .row_mut(0)
            .scaled_add(1.0, &dlogits);
    }
    total
}

/// Linear classification layer over relation representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `K x H` weights.
    pub w: Mat,
    pub b: Mat,
    /// Class index excluded from micro-F1 (the "no relation" class).
    pub nil_index: Option<usize>,
}

impl ClassifierHead {
    pub fn new(num_classes: usize, rep_dim: usize, nil_index: Option<usize>, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Mat::from_shape_fn((num_classes, rep_dim), |_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * 0.02
        });
        ClassifierHead {
            w,
            b: Mat::zeros((1, num_classes)),
            nil_index,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierHead {
            w: Mat::zeros(self.w.dim()),
            b: Mat::zeros(self.b.dim()),
            nil_index: self.nil_index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self, h_r: &Array1<f64>) -> Array1<f64> {
        let mut out = self.w.dot(h_r);
        out += &self.b.index_axis(Axis(0), 0);
        out
    }

    pub fn add_scaled(&mut self, other: &ClassifierHead, scale: f64) {
        self.w.scaled_add(scale, &other.w);
        self.b.scaled_add(scale, &other.b);
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Cross entropy of `softmax(W h_r + b)` at the true type.
pub fn supervised_loss(head: &ClassifierHead, h_r: &Array1<f64>, true_type: usize) -> Result<f64> {
    if true_type >= head.num_classes() {
        return Err(Error::UnknownLabel(format!("class id {true_type}")));
    }
    let probs = softmax(&head.logits(h_r));
    Ok(-probs[true_type].max(f64::MIN_POSITIVE).ln())
}

/// Loss value plus `scale`-weighted gradients: returns the gradient w.r.t.
/// `h_r` and accumulates head gradients into `head_grads`.
pub fn supervised_forward_backward(
    head: &ClassifierHead,
    h_r: &Array1<f64>,
    true_type: usize,
    scale: f64,
    head_grads: &mut ClassifierHead,
) -> Result<(f64, Array1<f64>)> {
    if true_type >= head.num_classes() {
        return Err(Error::UnknownLabel(format!("class id {true_type}")));
    }
    let mut dlogits = softmax(&head.logits(h_r));
    let loss = -dlogits[true_type].max(f64::MIN_POSITIVE).ln();
    dlogits[true_type] -= 1.0;
    dlogits *= scale;

    let d_h = head.w.t().dot(&dlogits);
    for (k, &dl) in dlogits.iter().enumerate() {
        head_grads.w.row_mut(k).scaled_add(dl, h_r);
    }
    head_grads.b.row_mut(0).scaled_add(1.0, &dlogits);
    Ok((loss, d_h))
}

/// Similarity scores of a query against candidate representations.
pub fn fewshot_scores(query: &Array1<f64>, candidates: &[Array1<f64>]) -> Vec<f64> {
    candidates.iter().map(|c| query.dot(c)).collect()
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax_tie_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Cross entropy of the softmax over candidate scores at the true index.
pub fn fewshot_loss(
    query: &Array1<f64>,
    candidates: &[Array1<f64>],
    true_index: usize,
) -> (f64, Array1<f64>, Vec<Array1<f64>>) {
    assert!(candidates.len() >= 2, "need at least two candidates");
    assert!(true_index < candidates.len());
    let scores = Array1::from_vec(fewshot_scores(query, candidates));
    let mut dscores = softmax(&scores);
    let loss = -dscores[true_index].max(f64::MIN_POSITIVE).ln();
    dscores[true_index] -= 1.0;

    let mut d_query = Array1::zeros(query.len());
    let mut d_cands = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        d_query.scaled_add(dscores[i], cand);
        d_cands.push(query * dscores[i]);
    }
    (loss, d_query, d_cands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probability_of_unit_overlap() {
        let e = array![1.0, 0.0, 0.0];
        let p = mtb_probability(&e, &e);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors_give_half() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(mtb_probability(&a, &b), 0.5);
    }

    #[test]
    fn probability_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let b = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            assert_eq!(mtb_probability(&a, &b), mtb_probability(&b, &a));
        }
    }

    #[test]
    fn positive_pair_with_zero_dot_costs_ln2() {
        let batch = vec![MtbPairRep {
            h_a: array![0.0, 0.0],
            h_b: array![1.0, 1.0],
            label: 1,
        }];
        let (loss, _) = mtb_loss(&batch);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn three_statement_corpus_matches_direct_pairwise_mean() {
        // r_A(e1,e2), r_B(e1,e2), r_C(e1,e3) with all-zero representations:
        // every unordered pair contributes ln 2 whatever its label, and the
        // brute-force mean over (A,B) positive, (A,C), (B,C) negative is
        // ln 2.
        let zero = Array1::zeros(4);
        let labels = [1u8, 0, 0];
        let brute: f64 = labels
            .iter()
            .map(|&y| {
                let p: f64 = 0.5;
                -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        let batch: Vec<MtbPairRep> = labels
            .iter()
            .map(|&label| MtbPairRep {
                h_a: zero.clone(),
                h_b: zero.clone(),
                label,
            })
            .collect();
        let (loss, _) = mtb_loss(&batch);
        assert!((loss - brute).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mtb_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch: Vec<MtbPairRep> = (0..2)
            .map(|i| MtbPairRep {
                h_a: Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0)),
                h_b: Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0)),
                label: i as u8,
            })
            .collect();
        let (_, grads) = mtb_loss(&batch);
        let step = 1e-6;
        for pair_idx in 0..batch.len() {
            for dim in 0..3 {
                let orig = batch[pair_idx].h_a[dim];
                batch[pair_idx].h_a[dim] = orig + step;
                let up = mtb_loss(&batch).0;
                batch[pair_idx].h_a[dim] = orig - step;
                let down = mtb_loss(&batch).0;
                batch[pair_idx].h_a[dim] = orig;
                let fd = (up - down) / (2.0 * step);
                let analytic = grads[pair_idx].0[dim];
                assert!(
                    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-3) < 1e-4,
                    "pair {pair_idx} dim {dim}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn supervised_uniform_logits_cost_ln_k() {
        let head = ClassifierHead {
            w: Mat::zeros((4, 3)),
            b: Mat::zeros((1, 4)),
            nil_index: None,
        };
        let loss = supervised_loss(&head, &array![0.5, -1.0, 2.0], 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_margin_closed_form() {
        let k = 5;
        let m = 1.7;
        let mut head = ClassifierHead {
            w: Mat::zeros((k, 1)),
            b: Mat::zeros((1, k)),
            nil_index: None,
        };
        head.b[[0, 2]] = m;
        let loss = supervised_loss(&head, &array![0.0], 2).unwrap();
        let expected = (1.0 + (k as f64 - 1.0) * (-m).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn supervised_out_of_range_class_is_an_error() {
        let head = ClassifierHead::new(3, 2, None, 0);
        assert!(supervised_loss(&head, &array![0.0, 0.0], 3).is_err());
    }

    #[test]
    fn mtb_loss_is_nonnegative_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let batch: Vec<MtbPairRep> = (0..4)
                .map(|i| MtbPairRep {
                    h_a: Array1::from_shape_fn(5, |_| rng.gen_range(-3.0..3.0)),
                    h_b: Array1::from_shape_fn(5, |_| rng.gen_range(-3.0..3.0)),
                    label: (i % 2) as u8,
                })
                .collect();
            let (loss, _) = mtb_loss(&batch);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        // sum_t exp(-loss(t)) recovers sum_t p_t, which must be 1.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let k = rng.gen_range(2..8);
            let head = ClassifierHead::new(k, 6, None, rng.gen());
            let h = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let total: f64 = (0..k)
                .map(|t| (-supervised_loss(&head, &h, t).unwrap()).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "sum of probabilities {total}");
        }
    }

    #[test]
    fn fewshot_prediction_and_ties() {
        let q = array![1.0, 0.0];
        let scores = fewshot_scores(&q, &[array![1.0, 0.0], array![0.0, 1.0]]);
        assert_eq!(scores, vec![1.0, 0.0]);
        assert_eq!(argmax_tie_lowest(&scores), 0);
        let tied = fewshot_scores(&q, &[array![0.3, 0.0], array![0.3, 0.0]]);
        assert_eq!(argmax_tie_lowest(&tied), 0);
    }

    #[test]
    fn fewshot_uniform_scores_cost_ln_n() {
        let q = array![0.0, 0.0];
        let cands: Vec<Array1<f64>> = (0..5).map(|_| array![1.0, 1.0]).collect();
        let (loss, ..) = fewshot_loss(&q, &cands, 2);
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }
}
