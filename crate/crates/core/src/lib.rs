//! Character-level probing toolkit for Chinese masked language models.
//!
//! The crate builds replacement and insertion probing datasets from
//! erroneous/corrected sentence pairs, generates character-level,
//! whole-word and mixed masking corpora, and scores any model's top-k
//! predictions through a line-delimited JSON bridge.

pub mod align;
pub mod bridge;
pub mod dataset;
pub mod eval;
pub mod mask;
pub mod segment;
pub mod text;

pub use align::{align_chars, align_pair, apply_edits, merge_edits, EditOp, EditType, OpKind, SpanEdit};
pub use text::{bucket_of, decode_sentence, LengthBucket, Sentence, Vocab};
