//! Forward and backward passes of the transformer stack.
//!
//! The layout is pre-LayerNorm: `x + Attn(LN(x))`, then `x + FFN(LN(x))`,
//! with one final LayerNorm producing the hidden states `H`. The backward
//! pass consumes the forward cache and accumulates into an
//! [`EncoderParams`]-shaped gradient buffer.

use ndarray::{s, Axis};

use super::input::EncodedInput;
use super::{EncoderModel, EncoderParams, LayerNormParams, Mat};
use crate::error::{Error, Result};
use crate::tokens::TokenId;

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    pub normed: Mat,
    pub out: Mat,
    pub invstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Mat, p: &LayerNormParams) -> LnCache {
    let (n, d) = x.dim();
    let mut normed = Mat::zeros((n, d));
    let mut out = Mat::zeros((n, d));
    let mut invstd = vec![0.0; n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invstd[r] = inv;
        for c in 0..d {
            let nv = (x[[r, c]] - mean) * inv;
            normed[[r, c]] = nv;
            out[[r, c]] = nv * p.gamma[[0, c]] + p.beta[[0, c]];
        }
    }
    LnCache { normed, out, invstd }
}

pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    p: &LayerNormParams,
    d_out: &Mat,
    d_gamma: &mut Mat,
    d_beta: &mut Mat,
) -> Mat {
    let (n, d) = d_out.dim();
    let mut dx = Mat::zeros((n, d));
    for r in 0..n {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            let dxh = d_out[[r, c]] * p.gamma[[0, c]];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * cache.normed[[r, c]];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for c in 0..d {
            let dxh = d_out[[r, c]] * p.gamma[[0, c]];
            dx[[r, c]] =
                cache.invstd[r] * (dxh - mean_dxh - cache.normed[[r, c]] * mean_dxh_xh);
            d_gamma[[0, c]] += d_out[[r, c]] * cache.normed[[r, c]];
            d_beta[[0, c]] += d_out[[r, c]];
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

struct LayerCache {
    ln1: LnCache,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    ln2: LnCache,
    ffn_pre: Mat,
    ffn_act: Mat,
}

/// Activations needed to run the backward pass for one sequence.
pub struct EncoderCache {
    ids: Vec<TokenId>,
    segs: Vec<u8>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

fn add_bias(mut m: Mat, bias: &Mat) -> Mat {
    for mut row in m.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias.row(0)) {
            *v += *b;
        }
    }
    m
}

fn add_row_sums(target: &mut Mat, m: &Mat) {
    let sums = m.sum_axis(Axis(0));
    for (t, s) in target.row_mut(0).iter_mut().zip(sums.iter()) {
        *t += *s;
    }
}

/// Run the transformer and keep the activation cache for a backward pass.
pub fn encode_with_cache(
    model: &EncoderModel,
    input: &EncodedInput,
) -> Result<(Mat, EncoderCache)> {
    let config = &model.config;
    let p = &model.params;
    let n = input.ids.len();
    if n == 0 || n > config.max_len {
        return Err(Error::StatementTooLong {
            len: n,
            max_len: config.max_len,
        });
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} out of range for vocab_size {}",
            config.vocab_size
        )));
    }

    let h = config.hidden;
    let mut x = Mat::zeros((n, h));
    for t in 0..n {
        let tok = p.token_emb.row(input.ids[t] as usize);
        let pos = p.pos_emb.row(t);
        let seg = p.seg_emb.row(input.segment_ids[t] as usize);
        for c in 0..h {
            x[[t, c]] = tok[c] + pos[c] + seg[c];
        }
    }

    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(config.layers);
    for layer in &p.layers {
        let ln1 = layer_norm_forward(&x, &layer.ln1);
        let q = add_bias(ln1.out.dot(&layer.attn.wq), &layer.attn.bq);
        let k = add_bias(ln1.out.dot(&layer.attn.wk), &layer.attn.bk);
        let v = add_bias(ln1.out.dot(&layer.attn.wv), &layer.attn.bv);

        let mut ctx = Mat::zeros((n, h));
        let mut probs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|v| v * scale);
            softmax_rows_inplace(&mut scores);
            let ctx_h = scores.dot(&v.slice(cols));
            ctx.slice_mut(cols).assign(&ctx_h);
            probs.push(scores);
        }
        let attn_out = add_bias(ctx.dot(&layer.attn.wo), &layer.attn.bo);
        let x_mid = &x + &attn_out;

        let ln2 = layer_norm_forward(&x_mid, &layer.ln2);
        let ffn_pre = add_bias(ln2.out.dot(&layer.ffn.w1), &layer.ffn.b1);
        let ffn_act = ffn_pre.mapv(gelu);
        let ffn_out = add_bias(ffn_act.dot(&layer.ffn.w2), &layer.ffn.b2);
        x = &x_mid + &ffn_out;

        layer_caches.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            ffn_pre,
            ffn_act,
        });
    }

    let final_ln = layer_norm_forward(&x, &p.final_ln);
    let hidden = final_ln.out.clone();
    if !hidden.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow("encoder hidden states"));
    }
    Ok((
        hidden,
        EncoderCache {
            ids: input.ids.clone(),
            segs: input.segment_ids.clone(),
            layers: layer_caches,
            final_ln,
        },
    ))
}

/// Deterministic inference pass: `H = [h_0 .. h_n]`, one row per token.
pub fn encode(model: &EncoderModel, input: &EncodedInput) -> Result<Mat> {
    encode_with_cache(model, input).map(|(h, _)| h)
}

/// Backpropagate `d_h` (gradient w.r.t. the hidden states) through the
/// whole stack, accumulating parameter gradients into `grads`.
pub fn encode_backward(
    model: &EncoderModel,
    cache: &EncoderCache,
    d_h: &Mat,
    grads: &mut EncoderParams,
) {
    let config = &model.config;
    let p = &model.params;
    let n = cache.ids.len();
    let h = config.hidden;
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let mut dx = layer_norm_backward(
        &cache.final_ln,
        &p.final_ln,
        d_h,
        &mut grads.final_ln.gamma,
        &mut grads.final_ln.beta,
    );

    for idx in (0..config.layers).rev() {
        let layer = &p.layers[idx];
        let lc = &cache.layers[idx];
        let g = &mut grads.layers[idx];

        // FFN block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
        let d_ffn_out = &dx;
        g.ffn.w2.scaled_add(1.0, &lc.ffn_act.t().dot(d_ffn_out));
        add_row_sums(&mut g.ffn.b2, d_ffn_out);
        let d_act = d_ffn_out.dot(&layer.ffn.w2.t());
        let d_pre = &d_act * &lc.ffn_pre.mapv(gelu_grad);
        g.ffn.w1.scaled_add(1.0, &lc.ln2.out.t().dot(&d_pre));
        add_row_sums(&mut g.ffn.b1, &d_pre);
        let d_y2 = d_pre.dot(&layer.ffn.w1.t());
        let d_mid_ln =
            layer_norm_backward(&lc.ln2, &layer.ln2, &d_y2, &mut g.ln2.gamma, &mut g.ln2.beta);
        let d_x_mid = &dx + &d_mid_ln;

        // Attention block: x_mid = x + Wo concat_h(P_h V_h) + bo
        let d_attn_out = &d_x_mid;
        g.attn.wo.scaled_add(1.0, &lc.ctx.t().dot(d_attn_out));
        add_row_sums(&mut g.attn.bo, d_attn_out);
        let d_ctx = d_attn_out.dot(&layer.attn.wo.t());

        let mut d_q = Mat::zeros((n, h));
        let mut d_k = Mat::zeros((n, h));
        let mut d_v = Mat::zeros((n, h));
        for head in 0..config.heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let d_ctx_h = d_ctx.slice(cols);
            let p_h = &lc.probs[head];

            d_v.slice_mut(cols).assign(&p_h.t().dot(&d_ctx_h));
            let d_p = d_ctx_h.dot(&lc.v.slice(cols).t());

            let mut d_s = Mat::zeros((n, n));
            for r in 0..n {
                let dot: f64 = (0..n).map(|c| d_p[[r, c]] * p_h[[r, c]]).sum();
                for c in 0..n {
                    d_s[[r, c]] = p_h[[r, c]] * (d_p[[r, c]] - dot) * scale;
                }
            }
            d_q.slice_mut(cols).assign(&d_s.dot(&lc.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&lc.q.slice(cols)));
        }

        g.attn.wq.scaled_add(1.0, &lc.ln1.out.t().dot(&d_q));
        add_row_sums(&mut g.attn.bq, &d_q);
        g.attn.wk.scaled_add(1.0, &lc.ln1.out.t().dot(&d_k));
        add_row_sums(&mut g.attn.bk, &d_k);
        g.attn.wv.scaled_add(1.0, &lc.ln1.out.t().dot(&d_v));
        add_row_sums(&mut g.attn.bv, &d_v);

        let d_y1 = d_q.dot(&layer.attn.wq.t())
            + d_k.dot(&layer.attn.wk.t())
            + d_v.dot(&layer.attn.wv.t());
        let d_in_ln =
            layer_norm_backward(&lc.ln1, &layer.ln1, &d_y1, &mut g.ln1.gamma, &mut g.ln1.beta);
        dx = &d_x_mid + &d_in_ln;
    }

    for t in 0..n {
        let row = dx.row(t);
        grads
            .token_emb
            .row_mut(cache.ids[t] as usize)
            .scaled_add(1.0, &row);
        grads.pos_emb.row_mut(t).scaled_add(1.0, &row);
        grads
            .seg_emb
            .row_mut(cache.segs[t] as usize)
            .scaled_add(1.0, &row);
    }
}
