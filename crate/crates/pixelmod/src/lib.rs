//! Finds near-duplicates of known images in a corpus, then keeps only the
//! ones whose overlay text agrees with the original.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod binary_index;
pub mod calibration;
pub mod corpus_store;
pub mod hashing;
pub mod ocr;
pub mod pipeline;
pub mod stories;
pub mod synth;
pub mod text_similarity;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/hashing.md")]
    mod hashing {}
    #[doc = include_str!("../../../book/src/binary-index.md")]
    mod binary_index {}
    #[doc = include_str!("../../../book/src/ocr.md")]
    mod ocr {}
    #[doc = include_str!("../../../book/src/text-similarity.md")]
    mod text_similarity {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/stories.md")]
    mod stories {}
    #[doc = include_str!("../../../book/src/corpus-store.md")]
    mod corpus_store {}
}
