//! Relation representation learning by matching the blanks.
//!
//! The crate covers the whole desk-scale pipeline: extracting relation
//! statements from entity-linked documents, generating blank-substituted
//! statement pairs, training a small transformer relation encoder with a
//! pairwise same-relation objective plus masked language modeling, and
//! evaluating the result on supervised classification and N-way-K-shot
//! exemplar matching.
//!
//! The accompanying book (`book/`) walks through each stage; its code
//! snippets are compiled and run as doc-tests of this crate.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod jsonl;
pub mod objectives;
pub mod pairgen;
pub mod synth;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};

// Book chapters double as doc-tests so the guide can never drift from the
// library. `cargo test --doc -p mtb` runs every snippet.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/statements.md")]
    mod statements {}
    #[doc = include_str!("../../../book/src/blanks-and-pairs.md")]
    mod blanks_and_pairs {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
