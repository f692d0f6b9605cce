//! The trainable relation encoder: a small pre-LayerNorm transformer over
//! token + position + segment embeddings, with selectable entity-span input
//! variants and relation-representation output heads.
//!
//! All math is 64-bit and single-threaded per sequence, so a forward pass is
//! bit-reproducible regardless of how many sequences run in parallel.

mod input;
mod net;
mod rep;

pub use input::{build_input, EncodedInput};
pub use net::{encode, encode_backward, encode_with_cache, EncoderCache};
pub use rep::{relation_rep, relation_rep_backward, RepCache};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2-D tensor of trainable parameters. Vectors are stored as `1 x n`.
pub type Mat = Array2<f64>;

/// How entity spans are communicated to the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    /// Token ids only; the model has no explicit span information.
    Standard,
    /// Segment embeddings mark span tokens: 1 for span 1, 2 for span 2.
    PositionalEmb,
    /// Reserved boundary tokens wrap each span.
    EntityMarkers,
}

/// How the fixed-length relation representation is read out of the final
/// hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputVariant {
    /// Hidden state at position 0.
    Cls,
    /// Concatenated elementwise max over each span.
    MentionPool,
    /// Concatenated hidden states at the two start-marker positions.
    EntityStart,
}

/// Transform applied after readout to produce the final representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostLayer {
    LinearDense,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub input_variant: InputVariant,
    pub output_variant: OutputVariant,
    pub post_layer: PostLayer,
    /// Zero in config files means "fill in from the vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_mult: 4,
            max_len: 128,
            input_variant: InputVariant::EntityMarkers,
            output_variant: OutputVariant::EntityStart,
            post_layer: PostLayer::LayerNorm,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.output_variant == OutputVariant::EntityStart
            && self.input_variant != InputVariant::EntityMarkers
        {
            return Err(Error::Config(
                "entity_start output requires entity_markers input".into(),
            ));
        }
        if self.vocab_size < crate::tokens::RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the reserved block",
                self.vocab_size
            )));
        }
        if self.max_len < 4 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("degenerate encoder dimensions".into()));
        }
        Ok(())
    }

    /// Dimension of the relation representation `h_r`.
    pub fn rep_dim(&self) -> usize {
        match self.output_variant {
            OutputVariant::Cls => self.hidden,
            OutputVariant::MentionPool | OutputVariant::EntityStart => 2 * self.hidden,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Mat,
    pub beta: Mat,
}

impl LayerNormParams {
    fn ones(dim: usize) -> Self {
        LayerNormParams {
            gamma: Mat::ones((1, dim)),
            beta: Mat::zeros((1, dim)),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gamma: Mat::zeros((1, dim)),
            beta: Mat::zeros((1, dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Parameters of the representation post-layer.
#[derive(Debug, Clone, PartialEq)]
pub enum PostParams {
    Dense { w: Mat, b: Mat },
    Norm(LayerNormParams),
}

/// Every trainable tensor of the encoder, in a fixed declaration order that
/// also fixes checkpoint layout and optimizer state alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_emb: Mat,
    pub pos_emb: Mat,
    pub seg_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub final_ln: LayerNormParams,
    pub post: PostParams,
    /// Output bias of the vocabulary softmax (weights are tied to
    /// `token_emb`).
    pub mlm_bias: Mat,
}

impl EncoderParams {
    /// Tensors in fixed order, paired with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit(&mut |name, tensor| out.push((name, tensor)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, tensor| out.push((name, tensor)));
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Mat)) {
        f("token_emb".into(), &self.token_emb);
        f("pos_emb".into(), &self.pos_emb);
        f("seg_emb".into(), &self.seg_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("layer.{i}.ln1.gamma"), &layer.ln1.gamma);
            f(format!("layer.{i}.ln1.beta"), &layer.ln1.beta);
            f(format!("layer.{i}.attn.wq"), &layer.attn.wq);
            f(format!("layer.{i}.attn.bq"), &layer.attn.bq);
            f(format!("layer.{i}.attn.wk"), &layer.attn.wk);
            f(format!("layer.{i}.attn.bk"), &layer.attn.bk);
            f(format!("layer.{i}.attn.wv"), &layer.attn.wv);
            f(format!("layer.{i}.attn.bv"), &layer.attn.bv);
            f(format!("layer.{i}.attn.wo"), &layer.attn.wo);
            f(format!("layer.{i}.attn.bo"), &layer.attn.bo);
            f(format!("layer.{i}.ln2.gamma"), &layer.ln2.gamma);
            f(format!("layer.{i}.ln2.beta"), &layer.ln2.beta);
            f(format!("layer.{i}.ffn.w1"), &layer.ffn.w1);
            f(format!("layer.{i}.ffn.b1"), &layer.ffn.b1);
            f(format!("layer.{i}.ffn.w2"), &layer.ffn.w2);
            f(format!("layer.{i}.ffn.b2"), &layer.ffn.b2);
        }
        f("final_ln.gamma".into(), &self.final_ln.gamma);
        f("final_ln.beta".into(), &self.final_ln.beta);
        match &self.post {
            PostParams::Dense { w, b } => {
                f("post.w".into(), w);
                f("post.b".into(), b);
            }
            PostParams::Norm(ln) => {
                f("post.gamma".into(), &ln.gamma);
                f("post.beta".into(), &ln.beta);
            }
        }
        f("mlm_bias".into(), &self.mlm_bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Mat)) {
        f("token_emb".into(), &mut self.token_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        f("seg_emb".into(), &mut self.seg_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("layer.{i}.ln1.gamma"), &mut layer.ln1.gamma);
            f(format!("layer.{i}.ln1.beta"), &mut layer.ln1.beta);
            f(format!("layer.{i}.attn.wq"), &mut layer.attn.wq);
            f(format!("layer.{i}.attn.bq"), &mut layer.attn.bq);
            f(format!("layer.{i}.attn.wk"), &mut layer.attn.wk);
            f(format!("layer.{i}.attn.bk"), &mut layer.attn.bk);
            f(format!("layer.{i}.attn.wv"), &mut layer.attn.wv);
            f(format!("layer.{i}.attn.bv"), &mut layer.attn.bv);
            f(format!("layer.{i}.attn.wo"), &mut layer.attn.wo);
            f(format!("layer.{i}.attn.bo"), &mut layer.attn.bo);
            f(format!("layer.{i}.ln2.gamma"), &mut layer.ln2.gamma);
            f(format!("layer.{i}.ln2.beta"), &mut layer.ln2.beta);
            f(format!("layer.{i}.ffn.w1"), &mut layer.ffn.w1);
            f(format!("layer.{i}.ffn.b1"), &mut layer.ffn.b1);
            f(format!("layer.{i}.ffn.w2"), &mut layer.ffn.w2);
            f(format!("layer.{i}.ffn.b2"), &mut layer.ffn.b2);
        }
        f("final_ln.gamma".into(), &mut self.final_ln.gamma);
        f("final_ln.beta".into(), &mut self.final_ln.beta);
        match &mut self.post {
            PostParams::Dense { w, b } => {
                f("post.w".into(), w);
                f("post.b".into(), b);
            }
            PostParams::Norm(ln) => {
                f("post.gamma".into(), &mut ln.gamma);
                f("post.beta".into(), &mut ln.beta);
            }
        }
        f("mlm_bias".into(), &mut self.mlm_bias);
    }

    /// Same shapes, all zeros. Used as the gradient accumulator.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let h = config.hidden;
        let f = config.ffn_dim();
        let layer = || LayerParams {
            ln1: LayerNormParams::zeros(h),
            attn: AttentionParams {
                wq: Mat::zeros((h, h)),
                bq: Mat::zeros((1, h)),
                wk: Mat::zeros((h, h)),
                bk: Mat::zeros((1, h)),
                wv: Mat::zeros((h, h)),
                bv: Mat::zeros((1, h)),
                wo: Mat::zeros((h, h)),
                bo: Mat::zeros((1, h)),
            },
            ln2: LayerNormParams::zeros(h),
            ffn: FfnParams {
                w1: Mat::zeros((h, f)),
                b1: Mat::zeros((1, f)),
                w2: Mat::zeros((f, h)),
                b2: Mat::zeros((1, h)),
            },
        };
        let d_rep = config.rep_dim();
        EncoderParams {
            token_emb: Mat::zeros((config.vocab_size, h)),
            pos_emb: Mat::zeros((config.max_len, h)),
            seg_emb: Mat::zeros((3, h)),
            layers: (0..config.layers).map(|_| layer()).collect(),
            final_ln: LayerNormParams::zeros(h),
            post: match config.post_layer {
                PostLayer::LinearDense => PostParams::Dense {
                    w: Mat::zeros((d_rep, d_rep)),
                    b: Mat::zeros((1, d_rep)),
                },
                PostLayer::LayerNorm => PostParams::Norm(LayerNormParams::zeros(d_rep)),
            },
            mlm_bias: Mat::zeros((1, config.vocab_size)),
        }
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        let mut mine = self.named_tensors_mut();
        let theirs = other.named_tensors();
        debug_assert_eq!(mine.len(), theirs.len());
        for ((name_a, a), (name_b, b)) in mine.iter_mut().zip(theirs.iter()) {
            debug_assert_eq!(name_a, name_b);
            a.scaled_add(scale, b);
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// The relation encoder `f_theta`: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

/// Standard normal draw via Box-Muller, so initialization only depends on
/// the seeded stream and not on any distribution crate's internals.
fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| randn(rng) * std)
}

const INIT_STD: f64 = 0.02;

impl EncoderModel {
    /// Fresh model with N(0, 0.02) weights drawn from `config.seed`. Layer
    /// norm scales start at one, biases at zero.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let f = config.ffn_dim();

        let token_emb = randn_mat(&mut rng, config.vocab_size, h, INIT_STD);
        let pos_emb = randn_mat(&mut rng, config.max_len, h, INIT_STD);
        let seg_emb = randn_mat(&mut rng, 3, h, INIT_STD);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::ones(h),
                attn: AttentionParams {
                    wq: randn_mat(&mut rng, h, h, INIT_STD),
                    bq: Mat::zeros((1, h)),
                    wk: randn_mat(&mut rng, h, h, INIT_STD),
                    bk: Mat::zeros((1, h)),
                    wv: randn_mat(&mut rng, h, h, INIT_STD),
                    bv: Mat::zeros((1, h)),
                    wo: randn_mat(&mut rng, h, h, INIT_STD),
                    bo: Mat::zeros((1, h)),
                },
                ln2: LayerNormParams::ones(h),
                ffn: FfnParams {
                    w1: randn_mat(&mut rng, h, f, INIT_STD),
                    b1: Mat::zeros((1, f)),
                    w2: randn_mat(&mut rng, f, h, INIT_STD),
                    b2: Mat::zeros((1, h)),
                },
            })
            .collect();
        let d_rep = config.rep_dim();
        let post = match config.post_layer {
            PostLayer::LinearDense => PostParams::Dense {
                w: randn_mat(&mut rng, d_rep, d_rep, INIT_STD),
                b: Mat::zeros((1, d_rep)),
            },
            PostLayer::LayerNorm => PostParams::Norm(LayerNormParams::ones(d_rep)),
        };

        Ok(EncoderModel {
            params: EncoderParams {
                token_emb,
                pos_emb,
                seg_emb,
                layers,
                final_ln: LayerNormParams::ones(h),
                post,
                mlm_bias: Mat::zeros((1, config.vocab_size)),
            },
            config,
        })
    }

    pub fn grad_buffer(&self) -> EncoderParams {
        EncoderParams::zeros(&self.config)
    }
}
