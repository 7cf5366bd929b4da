//! Unanswerable question generation for reading comprehension.
//!
//! The crate covers the whole pipeline: aligning answerable and
//! unanswerable SQuAD 2.0 questions through their shared answer span,
//! sequence-to-sequence and pair-to-sequence generators with attention and
//! a copy mechanism, constrained beam search, n-gram metrics, and
//! augmentation output in the SQuAD 2.0 schema.

mod error;

pub mod dataset;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
