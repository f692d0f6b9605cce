//! Optimizers, batching, and the training loops for pretraining and
//! fine-tuning. Batch gradients are computed pair-by-pair in parallel and
//! reduced in a fixed order, so a run is reproducible at any thread count.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::encoder::{
    build_input, encode_with_cache, relation_rep, relation_rep_backward, EncodedInput,
    EncoderModel, EncoderParams, Mat,
};
use crate::error::{Error, Result};
use crate::objectives::{
    mask_tokens, mlm_forward_backward, sigmoid, ClassifierHead, MlmBatch, DOT_CLAMP,
};
use crate::pairgen::PairRecord;

/// Stable seed mixing (FNV-1a) for deriving stream-specific rng seeds.
/// Exposed so callers can reproduce internally derived streams (the sweep
/// uses `mix_seed(seed, &[point])` for subsampling, for example).
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut absorb = |v: u64| {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    absorb(base);
    for &p in parts {
        absorb(p);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    MtbPretrain,
    SupervisedFinetune,
    FewshotFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlmMode {
    /// One batch optimizes the pair loss plus `lambda * mlm` together.
    #[default]
    Summed,
    /// Even steps optimize the pair loss, odd steps the mlm loss.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lambda() -> f64 {
    1.0
}
fn default_mask_prob() -> f64 {
    0.15
}
fn default_log_every() -> usize {
    50
}
fn default_n_way() -> usize {
    5
}
fn default_k_shot() -> usize {
    1
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => *lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda_mlm: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub mlm_mode: MlmMode,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_n_way")]
    pub n_way: usize,
    #[serde(default = "default_k_shot")]
    pub k_shot: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr() <= 0.0 && self.steps > 0 {
            // lr == 0 is allowed for no-op sanity runs.
        }
        if self.optimizer.lr() < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad train config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }
}

/// Plain gradient step: `p <- p - lr * g`.
pub fn sgd_step(param: &mut Mat, grad: &Mat, lr: f64) {
    param.scaled_add(-lr, grad);
}

/// Adam update with bias-corrected moments. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Mat,
    grad: &Mat,
    m: &mut Mat,
    v: &mut Mat,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

/// Optimizer with per-tensor state, aligned by position with the tensor
/// lists it is stepped with.
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: usize,
        m: Vec<Mat>,
        v: Vec<Mat>,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        match *config {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t: 0,
                m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
                v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            },
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Mat)], grads: &[(String, &Mat)], lr_scale: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd { lr } => {
                for ((_, p), (_, g)) in params.iter_mut().zip(grads) {
                    sgd_step(p, g, *lr * lr_scale);
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
                    adam_step(p, g, &mut m[i], &mut v[i], *t, *lr * lr_scale, *beta1, *beta2, *eps);
                }
            }
        }
    }
}

/// A pair ready for the encoder: both sides built for the model's input
/// variant.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub a: EncodedInput,
    pub b: EncodedInput,
    pub label: u8,
}

/// Build encoder inputs from serialized pair records.
pub fn prepare_pairs(
    records: &[PairRecord],
    config: &crate::encoder::EncoderConfig,
) -> Result<Vec<TrainPair>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainPair {
                a: build_input(&r.a.x, r.a.s1, r.a.s2, config.input_variant, config.max_len)?,
                b: build_input(&r.b.x, r.b.s1, r.b.s2, config.input_variant, config.max_len)?,
                label: r.label,
            })
        })
        .collect()
}

/// Build encoder inputs straight from generated statement pairs.
pub fn prepare_statement_pairs(
    pairs: &[crate::pairgen::StatementPair],
    config: &crate::encoder::EncoderConfig,
) -> Result<Vec<TrainPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(TrainPair {
                a: build_input(&p.a.x, p.a.s1, p.a.s2, config.input_variant, config.max_len)?,
                b: build_input(&p.b.x, p.b.s1, p.b.s2, config.input_variant, config.max_len)?,
                label: p.label,
            })
        })
        .collect()
}

type SideMasks = (Option<MlmBatch>, Option<MlmBatch>);

/// Draw the MLM masks for a slice of (dataset index, pair) items. Seeding is
/// keyed by the dataset index, not the batch position, so micro-batching
/// does not change the draws. Returns the masks and the total target count.
pub fn make_masks(
    items: &[(usize, &TrainPair)],
    vocab_size: usize,
    mask_prob: f64,
    base_seed: u64,
) -> (Vec<SideMasks>, usize) {
    let mut total = 0usize;
    let masks = items
        .iter()
        .map(|&(idx, pair)| {
            let mask_side = |input: &EncodedInput, side: u64| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base_seed, &[idx as u64, side]));
                mask_tokens(input, vocab_size, mask_prob, &mut rng).ok()
            };
            let a = mask_side(&pair.a, 0);
            let b = mask_side(&pair.b, 1);
            total += a.as_ref().map_or(0, |m| m.targets.len())
                + b.as_ref().map_or(0, |m| m.targets.len());
            (a, b)
        })
        .collect();
    (masks, total)
}

/// Accumulate MTB + MLM gradients for a micro-batch into `grads`.
/// `scale_mtb` and `scale_mlm` are the per-pair / per-target loss weights
/// (pass the values for the *full* batch when accumulating micro-batches).
/// Returns the summed pair loss and summed per-target mlm loss.
pub fn mtb_grads(
    model: &EncoderModel,
    items: &[(usize, &TrainPair)],
    masks: &[SideMasks],
    scale_mtb: f64,
    scale_mlm: f64,
    grads: &mut EncoderParams,
) -> Result<(f64, f64, usize)> {
    debug_assert_eq!(items.len(), masks.len());
    let per_pair: Vec<Result<(EncoderParams, f64, f64, usize)>> = items
        .par_iter()
        .zip(masks.par_iter())
        .map(|(&(_, pair), (mask_a, mask_b))| {
            let mut local = EncoderParams::zeros(&model.config);
            let mut bce = 0.0;
            let mut mlm_sum = 0.0;
            let mut correct = 0usize;

            let eff_a = mask_a.as_ref().map(|m| &m.input).unwrap_or(&pair.a);
            let eff_b = mask_b.as_ref().map(|m| &m.input).unwrap_or(&pair.b);
            let (h_a, cache_a) = encode_with_cache(model, eff_a)?;
            let (h_b, cache_b) = encode_with_cache(model, eff_b)?;
            let mut d_h_a = Mat::zeros(h_a.dim());
            let mut d_h_b = Mat::zeros(h_b.dim());

            if scale_mtb != 0.0 {
                let (rep_a, rc_a) = relation_rep(model, eff_a, &h_a)?;
                let (rep_b, rc_b) = relation_rep(model, eff_b, &h_b)?;

                let z = rep_a.dot(&rep_b).clamp(-DOT_CLAMP, DOT_CLAMP);
                let y = pair.label as f64;
                bce += y * (-z).exp().ln_1p() + (1.0 - y) * z.exp().ln_1p();
                correct += usize::from((z >= 0.0) == (pair.label == 1));
                let dz = (sigmoid(z) - y) * scale_mtb;

                relation_rep_backward(model, eff_a, &rc_a, &(&rep_b * dz), &mut d_h_a, &mut local);
                relation_rep_backward(model, eff_b, &rc_b, &(&rep_a * dz), &mut d_h_b, &mut local);
            }
            if scale_mlm != 0.0 {
                if let Some(m) = mask_a {
                    mlm_sum +=
                        mlm_forward_backward(model, &h_a, &m.targets, scale_mlm, &mut d_h_a, &mut local);
                }
                if let Some(m) = mask_b {
                    mlm_sum +=
                        mlm_forward_backward(model, &h_b, &m.targets, scale_mlm, &mut d_h_b, &mut local);
                }
            }
            crate::encoder::encode_backward(model, &cache_a, &d_h_a, &mut local);
            crate::encoder::encode_backward(model, &cache_b, &d_h_b, &mut local);
            Ok((local, bce, mlm_sum, correct))
        })
        .collect();

    let mut bce_sum = 0.0;
    let mut mlm_sum = 0.0;
    let mut correct_sum = 0usize;
    for result in per_pair {
        let (local, bce, mlm, correct) = result?;
        grads.add_scaled(&local, 1.0);
        bce_sum += bce;
        mlm_sum += mlm;
        correct_sum += correct;
    }
    Ok((bce_sum, mlm_sum, correct_sum))
}

/// Forward-only companion of [`mtb_grads`]: the summed pair and mlm losses
/// for the same items and masks. Used by finite-difference oracles.
pub fn mtb_loss_only(
    model: &EncoderModel,
    items: &[(usize, &TrainPair)],
    masks: &[SideMasks],
    with_pair_loss: bool,
) -> Result<(f64, f64)> {
    let mut bce_sum = 0.0;
    let mut mlm_sum = 0.0;
    for (&(_, pair), (mask_a, mask_b)) in items.iter().zip(masks) {
        let eff_a = mask_a.as_ref().map(|m| &m.input).unwrap_or(&pair.a);
        let eff_b = mask_b.as_ref().map(|m| &m.input).unwrap_or(&pair.b);
        let (h_a, _) = encode_with_cache(model, eff_a)?;
        let (h_b, _) = encode_with_cache(model, eff_b)?;
        if with_pair_loss {
            let (rep_a, _) = relation_rep(model, eff_a, &h_a)?;
            let (rep_b, _) = relation_rep(model, eff_b, &h_b)?;
            let z = rep_a.dot(&rep_b).clamp(-DOT_CLAMP, DOT_CLAMP);
            let y = pair.label as f64;
            bce_sum += y * (-z).exp().ln_1p() + (1.0 - y) * z.exp().ln_1p();
        }
        if let Some(m) = mask_a {
            mlm_sum += crate::objectives::mlm_loss_sum(model, &h_a, &m.targets);
        }
        if let Some(m) = mask_b {
            mlm_sum += crate::objectives::mlm_loss_sum(model, &h_b, &m.targets);
        }
    }
    Ok((bce_sum, mlm_sum))
}

/// One metrics log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mtb_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_loss: Option<f64>,
    /// Batch-level accuracy: pair classification at p = 1/2 for
    /// pretraining, class accuracy for the fine-tuning modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Where to write checkpoints during training.
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub vocab_hash: String,
}

pub struct TrainOutcome {
    pub model: EncoderModel,
    pub head: Option<ClassifierHead>,
    pub metrics: Vec<MetricsRecord>,
}

/// Training data matching the configured mode.
pub enum TrainData<'a> {
    Pairs(&'a [TrainPair]),
    Supervised(&'a [(EncodedInput, usize)]),
    /// Per-class encoder inputs for episode sampling.
    Fewshot(&'a [Vec<EncodedInput>]),
}

/// Cycling, epoch-shuffled index stream.
struct BatchSchedule {
    n: usize,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl BatchSchedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut schedule = BatchSchedule {
            n,
            seed,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
        };
        schedule.reshuffle();
        schedule
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[self.epoch]));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Drive the configured training loop. `head` is required for
/// `supervised_finetune` and created by callers; pretraining ignores it.
pub fn train(
    model: EncoderModel,
    head: Option<ClassifierHead>,
    data: TrainData,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    config.validate()?;
    match (config.mode, &data) {
        (TrainMode::MtbPretrain, TrainData::Pairs(pairs)) => {
            train_mtb(model, pairs, config, sink)
        }
        (TrainMode::SupervisedFinetune, TrainData::Supervised(examples)) => {
            let head = head.ok_or_else(|| {
                Error::Config("supervised_finetune requires a classifier head".into())
            })?;
            train_supervised(model, head, examples, config, sink)
        }
        (TrainMode::FewshotFinetune, TrainData::Fewshot(classes)) => {
            train_fewshot(model, classes, config, sink)
        }
        _ => Err(Error::Config(
            "training data does not match the configured mode".into(),
        )),
    }
}

fn maybe_checkpoint(
    sink: Option<&CheckpointSink>,
    step: usize,
    every: usize,
    model: &EncoderModel,
    head: Option<&ClassifierHead>,
) -> Result<()> {
    if let Some(sink) = sink {
        if every > 0 && step % every == 0 {
            let stem = sink.dir.join(format!("ckpt-{step:06}"));
            crate::checkpoint::save_checkpoint(&stem, model, head, &sink.vocab_hash)?;
        }
    }
    Ok(())
}

fn finalize(
    sink: Option<&CheckpointSink>,
    model: EncoderModel,
    head: Option<ClassifierHead>,
    metrics: Vec<MetricsRecord>,
) -> Result<TrainOutcome> {
    if let Some(sink) = sink {
        let stem = sink.dir.join("ckpt-final");
        crate::checkpoint::save_checkpoint(&stem, &model, head.as_ref(), &sink.vocab_hash)?;
    }
    Ok(TrainOutcome {
        model,
        head,
        metrics,
    })
}

fn lr_scale(config: &TrainConfig, step: usize) -> f64 {
    if config.warmup_steps > 0 && step < config.warmup_steps {
        (step + 1) as f64 / config.warmup_steps as f64
    } else {
        1.0
    }
}

fn train_mtb(
    mut model: EncoderModel,
    pairs: &[TrainPair],
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let shapes: Vec<(usize, usize)> = model
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.dim())
        .collect();
    let mut optimizer = Optimizer::new(&config.optimizer, &shapes);
    let mut schedule = BatchSchedule::new(pairs.len(), mix_seed(config.seed, &[1]));
    let mut metrics = Vec::new();

    for step in 0..config.steps {
        let indices = schedule.next_batch(config.batch_size);
        let items: Vec<(usize, &TrainPair)> =
            indices.iter().map(|&i| (i, &pairs[i])).collect();

        let (mtb_on, mlm_on) = match config.mlm_mode {
            MlmMode::Summed => (true, config.lambda_mlm != 0.0),
            MlmMode::Alternating => (step % 2 == 0, step % 2 == 1),
        };
        let (masks, n_targets) = if mlm_on {
            make_masks(
                &items,
                model.config.vocab_size,
                config.mask_prob,
                mix_seed(config.seed, &[2, step as u64]),
            )
        } else {
            (vec![(None, None); items.len()], 0)
        };
        let scale_mtb = if mtb_on { 1.0 / items.len() as f64 } else { 0.0 };
        let scale_mlm = if n_targets > 0 {
            config.lambda_mlm / n_targets as f64
        } else {
            0.0
        };

        let mut grads = model.grad_buffer();
        let (bce_sum, mlm_sum, correct) =
            mtb_grads(&model, &items, &masks, scale_mtb, scale_mlm, &mut grads)?;
        let mtb_loss = if mtb_on { bce_sum / items.len() as f64 } else { 0.0 };
        let mlm_loss = if n_targets > 0 {
            mlm_sum / n_targets as f64
        } else {
            0.0
        };
        let loss = mtb_loss + config.lambda_mlm * mlm_loss;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }

        {
            let mut params = model.params.named_tensors_mut();
            let grad_list = grads.named_tensors();
            optimizer.step(&mut params, &grad_list, lr_scale(config, step));
        }

        if step % config.log_every == 0 || step + 1 == config.steps {
            metrics.push(MetricsRecord {
                step,
                loss,
                mtb_loss: Some(mtb_loss),
                mlm_loss: Some(mlm_loss),
                accuracy: mtb_on.then(|| correct as f64 / items.len() as f64),
            });
        }
        maybe_checkpoint(sink, step + 1, config.checkpoint_every, &model, None)?;
    }
    finalize(sink, model, None, metrics)
}

/// Per-example supervised gradient accumulation, parallel over the batch.
pub fn supervised_grads(
    model: &EncoderModel,
    head: &ClassifierHead,
    batch: &[&(EncodedInput, usize)],
    scale: f64,
    grads: &mut EncoderParams,
    head_grads: &mut ClassifierHead,
) -> Result<(f64, usize)> {
    let per_example: Vec<Result<(EncoderParams, ClassifierHead, f64, bool)>> = batch
        .par_iter()
        .map(|(input, true_type)| {
            let mut local = EncoderParams::zeros(&model.config);
            let mut local_head = head.zeros_like();
            let (h, cache) = encode_with_cache(model, input)?;
            let (rep, rep_cache) = relation_rep(model, input, &h)?;
            let logits = head.logits(&rep);
            let correct =
                crate::objectives::argmax_tie_lowest(logits.as_slice().unwrap()) == *true_type;
            let (loss, d_rep) =
                crate::objectives::supervised_forward_backward(head, &rep, *true_type, scale, &mut local_head)?;
            let mut d_h = Mat::zeros(h.dim());
            relation_rep_backward(model, input, &rep_cache, &d_rep, &mut d_h, &mut local);
            crate::encoder::encode_backward(model, &cache, &d_h, &mut local);
            Ok((local, local_head, loss, correct))
        })
        .collect();

    let mut total = 0.0;
    let mut correct_sum = 0usize;
    for result in per_example {
        let (local, local_head, loss, correct) = result?;
        grads.add_scaled(&local, 1.0);
        head_grads.add_scaled(&local_head, 1.0);
        total += loss;
        correct_sum += usize::from(correct);
    }
    Ok((total, correct_sum))
}

fn train_supervised(
    mut model: EncoderModel,
    mut head: ClassifierHead,
    examples: &[(EncodedInput, usize)],
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Config("no labeled examples".into()));
    }
    let mut shapes: Vec<(usize, usize)> = model
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.dim())
        .collect();
    shapes.push(head.w.dim());
    shapes.push(head.b.dim());
    let mut optimizer = Optimizer::new(&config.optimizer, &shapes);
    let mut schedule = BatchSchedule::new(examples.len(), mix_seed(config.seed, &[3]));
    let mut metrics = Vec::new();

    for step in 0..config.steps {
        let indices = schedule.next_batch(config.batch_size);
        let batch: Vec<&(EncodedInput, usize)> = indices.iter().map(|&i| &examples[i]).collect();
        let scale = 1.0 / batch.len() as f64;

        let mut grads = model.grad_buffer();
        let mut head_grads = head.zeros_like();
        let (loss_sum, correct) =
            supervised_grads(&model, &head, &batch, scale, &mut grads, &mut head_grads)?;
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }

        {
            let mut params = model.params.named_tensors_mut();
            params.push(("head.w".into(), &mut head.w));
            params.push(("head.b".into(), &mut head.b));
            let mut grad_list = grads.named_tensors();
            grad_list.push(("head.w".into(), &head_grads.w));
            grad_list.push(("head.b".into(), &head_grads.b));
            optimizer.step(&mut params, &grad_list, lr_scale(config, step));
        }

        if step % config.log_every == 0 || step + 1 == config.steps {
            metrics.push(MetricsRecord {
                step,
                loss,
                mtb_loss: None,
                mlm_loss: None,
                accuracy: Some(correct as f64 / batch.len() as f64),
            });
        }
        maybe_checkpoint(sink, step + 1, config.checkpoint_every, &model, Some(&head))?;
    }
    finalize(sink, model, Some(head), metrics)
}

fn train_fewshot(
    mut model: EncoderModel,
    classes: &[Vec<EncodedInput>],
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    let n_way = config.n_way;
    let k_shot = config.k_shot;
    if classes.len() < n_way {
        return Err(Error::InsufficientTypes {
            have: classes.len(),
            need: n_way,
        });
    }
    for (i, class) in classes.iter().enumerate() {
        if class.len() < k_shot + 1 {
            return Err(Error::InsufficientExamples {
                relation: format!("class {i}"),
                have: class.len(),
                need: k_shot + 1,
            });
        }
    }

    let shapes: Vec<(usize, usize)> = model
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.dim())
        .collect();
    let mut optimizer = Optimizer::new(&config.optimizer, &shapes);
    let mut metrics = Vec::new();

    for step in 0..config.steps {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[4, step as u64]));
        // One episode per batch slot.
        let episodes: Vec<(Vec<(usize, Vec<usize>)>, (usize, usize), usize)> = (0..config
            .batch_size)
            .map(|_| {
                let mut class_ids: Vec<usize> = (0..classes.len()).collect();
                class_ids.shuffle(&mut rng);
                class_ids.truncate(n_way);
                let true_slot = rng.gen_range(0..n_way);
                let mut support = Vec::with_capacity(n_way);
                let mut query = (0, 0);
                for (slot, &cid) in class_ids.iter().enumerate() {
                    let mut member_ids: Vec<usize> = (0..classes[cid].len()).collect();
                    member_ids.shuffle(&mut rng);
                    let take = if slot == true_slot { k_shot + 1 } else { k_shot };
                    let picked: Vec<usize> = member_ids.into_iter().take(take).collect();
                    if slot == true_slot {
                        query = (cid, picked[k_shot]);
                        support.push((cid, picked[..k_shot].to_vec()));
                    } else {
                        support.push((cid, picked));
                    }
                }
                (support, query, true_slot)
            })
            .collect();

        let scale = 1.0 / episodes.len() as f64;
        let per_episode: Vec<Result<(EncoderParams, f64, bool)>> = episodes
            .par_iter()
            .map(|(support, query, true_slot)| {
                fewshot_episode_grads(&model, classes, support, *query, *true_slot, scale)
            })
            .collect();

        let mut grads = model.grad_buffer();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for result in per_episode {
            let (local, loss, right) = result?;
            grads.add_scaled(&local, 1.0);
            loss_sum += loss;
            correct += usize::from(right);
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }

        {
            let mut params = model.params.named_tensors_mut();
            let grad_list = grads.named_tensors();
            optimizer.step(&mut params, &grad_list, lr_scale(config, step));
        }

        if step % config.log_every == 0 || step + 1 == config.steps {
            metrics.push(MetricsRecord {
                step,
                loss,
                mtb_loss: None,
                mlm_loss: None,
                accuracy: Some(correct as f64 / config.batch_size as f64),
            });
        }
        maybe_checkpoint(sink, step + 1, config.checkpoint_every, &model, None)?;
    }
    finalize(sink, model, None, metrics)
}

/// Forward-only episode loss matching [`fewshot_episode_grads`].
pub fn fewshot_episode_loss(
    model: &EncoderModel,
    classes: &[Vec<EncodedInput>],
    support: &[(usize, Vec<usize>)],
    query: (usize, usize),
    true_slot: usize,
) -> Result<f64> {
    let q_input = &classes[query.0][query.1];
    let (q_h, _) = encode_with_cache(model, q_input)?;
    let (q_rep, _) = relation_rep(model, q_input, &q_h)?;
    let mut scores = Vec::with_capacity(support.len());
    for (cid, members) in support {
        let mut best = f64::NEG_INFINITY;
        for &mid in members {
            let input = &classes[*cid][mid];
            let (h, _) = encode_with_cache(model, input)?;
            let (rep, _) = relation_rep(model, input, &h)?;
            best = best.max(q_rep.dot(&rep));
        }
        scores.push(best);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(-((scores[true_slot] - max).exp() / denom).max(f64::MIN_POSITIVE).ln())
}

/// Gradient of one episode: cross entropy over class scores, where a class
/// score is the max over its K support similarities (gradient routed to the
/// argmax support).
pub fn fewshot_episode_grads(
    model: &EncoderModel,
    classes: &[Vec<EncodedInput>],
    support: &[(usize, Vec<usize>)],
    query: (usize, usize),
    true_slot: usize,
    scale: f64,
) -> Result<(EncoderParams, f64, bool)> {
    let mut local = EncoderParams::zeros(&model.config);

    let q_input = &classes[query.0][query.1];
    let (q_h, q_cache) = encode_with_cache(model, q_input)?;
    let (q_rep, q_rep_cache) = relation_rep(model, q_input, &q_h)?;

    struct SupportState {
        input_ref: (usize, usize),
        rep: Array1<f64>,
        h: Mat,
        cache: crate::encoder::EncoderCache,
        rep_cache: crate::encoder::RepCache,
    }

    let mut best: Vec<SupportState> = Vec::with_capacity(support.len());
    let mut scores = Vec::with_capacity(support.len());
    for (cid, members) in support {
        let mut best_state: Option<(f64, SupportState)> = None;
        for &mid in members {
            let input = &classes[*cid][mid];
            let (h, cache) = encode_with_cache(model, input)?;
            let (rep, rep_cache) = relation_rep(model, input, &h)?;
            let score = q_rep.dot(&rep);
            let state = SupportState {
                input_ref: (*cid, mid),
                rep,
                h,
                cache,
                rep_cache,
            };
            match &best_state {
                Some((s, _)) if *s >= score => {}
                _ => best_state = Some((score, state)),
            }
        }
        let (score, state) = best_state.expect("k_shot >= 1");
        scores.push(score);
        best.push(state);
    }

    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let loss = -probs[true_slot].max(f64::MIN_POSITIVE).ln();

    let mut d_q_rep = Array1::zeros(q_rep.len());
    for (slot, state) in best.iter().enumerate() {
        let d_score = (probs[slot] - if slot == true_slot { 1.0 } else { 0.0 }) * scale;
        d_q_rep.scaled_add(d_score, &state.rep);
        let d_rep = &q_rep * d_score;
        let input = &classes[state.input_ref.0][state.input_ref.1];
        let mut d_h = Mat::zeros(state.h.dim());
        relation_rep_backward(model, input, &state.rep_cache, &d_rep, &mut d_h, &mut local);
        crate::encoder::encode_backward(model, &state.cache, &d_h, &mut local);
    }
    let mut d_q_h = Mat::zeros(q_h.dim());
    relation_rep_backward(model, q_input, &q_rep_cache, &d_q_rep, &mut d_q_h, &mut local);
    crate::encoder::encode_backward(model, &q_cache, &d_q_h, &mut local);

    let predicted = crate::objectives::argmax_tie_lowest(&scores);
    Ok((local, loss, predicted == true_slot))
}
