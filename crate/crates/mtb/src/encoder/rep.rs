//! Fixed-length relation representations read out of the hidden states,
//! plus the configurable post layer (affine map or layer normalization).

use ndarray::Array1;

use super::input::EncodedInput;
use super::net::{layer_norm_backward, layer_norm_forward, LnCache};
use super::{EncoderModel, EncoderParams, Mat, OutputVariant, PostParams};
use crate::error::{Error, Result};

/// Activations for [`relation_rep_backward`].
pub struct RepCache {
    raw: Array1<f64>,
    /// Argmax row per output dimension for the two pooled spans.
    pool_argmax: Option<(Vec<usize>, Vec<usize>)>,
    post_ln: Option<LnCache>,
}

fn maxpool_span(h: &Mat, start: usize, end: usize) -> (Array1<f64>, Vec<usize>) {
    let d = h.ncols();
    let mut out = Array1::from_elem(d, f64::NEG_INFINITY);
    let mut argmax = vec![start; d];
    for r in start..end {
        for c in 0..d {
            if h[[r, c]] > out[c] {
                out[c] = h[[r, c]];
                argmax[c] = r;
            }
        }
    }
    (out, argmax)
}

/// Extract `h_r` from the hidden states according to the model's output
/// variant, then apply the post layer.
pub fn relation_rep(
    model: &EncoderModel,
    input: &EncodedInput,
    h: &Mat,
) -> Result<(Array1<f64>, RepCache)> {
    let (raw, pool_argmax) = match model.config.output_variant {
        OutputVariant::Cls => (h.row(0).to_owned(), None),
        OutputVariant::MentionPool => {
            let (p1, a1) = maxpool_span(h, input.span1.start, input.span1.end);
            let (p2, a2) = maxpool_span(h, input.span2.start, input.span2.end);
            let mut raw = Array1::zeros(2 * h.ncols());
            raw.slice_mut(ndarray::s![..h.ncols()]).assign(&p1);
            raw.slice_mut(ndarray::s![h.ncols()..]).assign(&p2);
            (raw, Some((a1, a2)))
        }
        OutputVariant::EntityStart => {
            let (m1, m2) = match (input.marker1, input.marker2) {
                (Some(m1), Some(m2)) => (m1, m2),
                _ => {
                    return Err(Error::Config(
                        "entity_start output requires marker positions in the input".into(),
                    ))
                }
            };
            let mut raw = Array1::zeros(2 * h.ncols());
            raw.slice_mut(ndarray::s![..h.ncols()]).assign(&h.row(m1));
            raw.slice_mut(ndarray::s![h.ncols()..]).assign(&h.row(m2));
            (raw, None)
        }
    };

    let (out, post_ln) = match &model.params.post {
        PostParams::Dense { w, b } => {
            let mut out = Array1::zeros(raw.len());
            for i in 0..raw.len() {
                out[i] = w.row(i).dot(&raw) + b[[0, i]];
            }
            (out, None)
        }
        PostParams::Norm(ln) => {
            let row = raw.clone().insert_axis(ndarray::Axis(0));
            let cache = layer_norm_forward(&row, ln);
            (cache.out.row(0).to_owned(), Some(cache))
        }
    };

    Ok((
        out,
        RepCache {
            raw,
            pool_argmax,
            post_ln,
        },
    ))
}

/// Push `d_out` (gradient w.r.t. the final representation) back into the
/// hidden-state gradient `d_h` and the post-layer parameter gradients.
pub fn relation_rep_backward(
    model: &EncoderModel,
    input: &EncodedInput,
    cache: &RepCache,
    d_out: &Array1<f64>,
    d_h: &mut Mat,
    grads: &mut EncoderParams,
) {
    let d_raw: Array1<f64> = match (&model.params.post, &mut grads.post) {
        (PostParams::Dense { w, .. }, PostParams::Dense { w: gw, b: gb }) => {
            let mut d_raw = Array1::zeros(cache.raw.len());
            for i in 0..d_out.len() {
                gb[[0, i]] += d_out[i];
                for j in 0..cache.raw.len() {
                    gw[[i, j]] += d_out[i] * cache.raw[j];
                    d_raw[j] += d_out[i] * w[[i, j]];
                }
            }
            d_raw
        }
        (PostParams::Norm(ln), PostParams::Norm(gln)) => {
            let ln_cache = cache.post_ln.as_ref().expect("post layer cache");
            let d_row = d_out.clone().insert_axis(ndarray::Axis(0));
            let dx = layer_norm_backward(ln_cache, ln, &d_row, &mut gln.gamma, &mut gln.beta);
            dx.row(0).to_owned()
        }
        _ => unreachable!("post layer kind mismatch between params and grads"),
    };

    let hidden = d_h.ncols();
    match model.config.output_variant {
        OutputVariant::Cls => {
            d_h.row_mut(0).scaled_add(1.0, &d_raw);
        }
        OutputVariant::MentionPool => {
            let (a1, a2) = cache.pool_argmax.as_ref().expect("pool cache");
            for c in 0..hidden {
                d_h[[a1[c], c]] += d_raw[c];
                d_h[[a2[c], c]] += d_raw[hidden + c];
            }
        }
        OutputVariant::EntityStart => {
            let (m1, m2) = (input.marker1.unwrap(), input.marker2.unwrap());
            for c in 0..hidden {
                d_h[[m1, c]] += d_raw[c];
                d_h[[m2, c]] += d_raw[hidden + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use crate::encoder::{build_input, encode, EncoderConfig, InputVariant, PostLayer};
    use crate::tokens::{CLS, SEP};

    fn model(output: OutputVariant, input: InputVariant, post: PostLayer) -> EncoderModel {
        EncoderModel::new(EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            vocab_size: 30,
            seed: 6,
            input_variant: input,
            output_variant: output,
            post_layer: post,
        })
        .unwrap()
    }

    #[test]
    fn maxpool_matches_naive_per_dimension_max() {
        let h = Mat::from_shape_vec((2, 2), vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let (pooled, _) = maxpool_span(&h, 0, 2);
        assert_eq!(pooled.to_vec(), vec![3.0, 0.0]);
        // Single-row span is the identity.
        let (single, _) = maxpool_span(&h, 1, 2);
        assert_eq!(single.to_vec(), vec![3.0, 0.0]);
    }

    #[test]
    fn entity_start_concatenates_marker_states() {
        let m = model(
            OutputVariant::EntityStart,
            InputVariant::EntityMarkers,
            PostLayer::LayerNorm,
        );
        let x = vec![CLS, 21, 22, 23, 24, SEP];
        let input =
            build_input(&x, Span::new(1, 2), Span::new(3, 5), InputVariant::EntityMarkers, 16)
                .unwrap();
        let h = encode(&m, &input).unwrap();
        let (_, cache) = relation_rep(&m, &input, &h).unwrap();
        // Pre-post-layer readout is exactly H[1] | H[5].
        let mut expected: Vec<f64> = h.row(1).to_vec();
        expected.extend(h.row(5).to_vec());
        assert_eq!(cache.raw.to_vec(), expected);
    }

    #[test]
    fn entity_start_without_markers_is_an_error() {
        let m = model(
            OutputVariant::EntityStart,
            InputVariant::EntityMarkers,
            PostLayer::LayerNorm,
        );
        let x = vec![CLS, 21, 22, 23, 24, SEP];
        let input =
            build_input(&x, Span::new(1, 2), Span::new(3, 5), InputVariant::Standard, 16).unwrap();
        let h = encode(&m, &input).unwrap();
        assert!(relation_rep(&m, &input, &h).is_err());
    }

    #[test]
    fn cls_rep_is_row_zero_through_dense_post() {
        let m = model(OutputVariant::Cls, InputVariant::Standard, PostLayer::LinearDense);
        let x = vec![CLS, 21, 22, 23, 24, SEP];
        let input =
            build_input(&x, Span::new(1, 2), Span::new(3, 5), InputVariant::Standard, 16).unwrap();
        let h = encode(&m, &input).unwrap();
        let (rep, cache) = relation_rep(&m, &input, &h).unwrap();
        assert_eq!(cache.raw.to_vec(), h.row(0).to_vec());
        assert_eq!(rep.len(), 8);
    }
}
