//! Input construction for the three entity-span variants.

use serde::{Deserialize, Serialize};

use super::InputVariant;
use crate::corpus::Span;
use crate::error::{Error, Result};
use crate::tokens::{TokenId, E1_END, E1_START, E2_END, E2_START};

/// A statement prepared for the encoder: token ids, segment ids, effective
/// spans, and (for the marker variant) the positions of the start markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
    pub span1: Span,
    pub span2: Span,
    pub marker1: Option<usize>,
    pub marker2: Option<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_spans(len: usize, s1: Span, s2: Span) -> Result<()> {
    let ordered = 0 < s1.start && s1.start < s1.end && s1.end <= s2.start && s2.start < s2.end;
    if !ordered || s2.end > len.saturating_sub(1) {
        return Err(Error::SpanOverlap(s1.start, s1.end, s2.start, s2.end));
    }
    Ok(())
}

/// Build the encoder input for `variant` from a statement's token ids and
/// spans (`[CLS]`/`[SEP]` already in place, `s1` textually first).
///
/// For `entity_markers` the spans shift to `(i+1, j+1)` and `(k+3, l+3)` to
/// account for the inserted boundary tokens, and `marker1`/`marker2` point
/// at `[E1start]`/`[E2start]`.
pub fn build_input(
    x: &[TokenId],
    s1: Span,
    s2: Span,
    variant: InputVariant,
    max_len: usize,
) -> Result<EncodedInput> {
    check_spans(x.len(), s1, s2)?;
    let needed = match variant {
        InputVariant::EntityMarkers => x.len() + 4,
        _ => x.len(),
    };
    if needed > max_len {
        return Err(Error::StatementTooLong {
            len: needed,
            max_len,
        });
    }

    match variant {
        InputVariant::Standard => Ok(EncodedInput {
            ids: x.to_vec(),
            segment_ids: vec![0; x.len()],
            span1: s1,
            span2: s2,
            marker1: None,
            marker2: None,
        }),
        InputVariant::PositionalEmb => {
            let mut segment_ids = vec![0u8; x.len()];
            segment_ids[s1.start..s1.end].fill(1);
            segment_ids[s2.start..s2.end].fill(2);
            Ok(EncodedInput {
                ids: x.to_vec(),
                segment_ids,
                span1: s1,
                span2: s2,
                marker1: None,
                marker2: None,
            })
        }
        InputVariant::EntityMarkers => {
            let (i, j) = (s1.start, s1.end);
            let (k, l) = (s2.start, s2.end);
            let mut ids = Vec::with_capacity(x.len() + 4);
            ids.extend_from_slice(&x[..i]);
            ids.push(E1_START);
            ids.extend_from_slice(&x[i..j]);
            ids.push(E1_END);
            ids.extend_from_slice(&x[j..k]);
            ids.push(E2_START);
            ids.extend_from_slice(&x[k..l]);
            ids.push(E2_END);
            ids.extend_from_slice(&x[l..]);
            Ok(EncodedInput {
                segment_ids: vec![0; ids.len()],
                ids,
                span1: Span::new(i + 1, j + 1),
                span2: Span::new(k + 3, l + 3),
                marker1: Some(i),
                marker2: Some(k + 2),
            })
        }
    }
}
