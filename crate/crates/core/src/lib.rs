//! Discovery of discriminative temporal phenotypes from longitudinal
//! coded-event records.
//!
//! The crate covers cohort ingestion and synthesis, propensity matching with
//! a continuity-corrected chi-square test, skip-gram co-occurrence
//! embeddings, patient transition tensors, a supervised similarity-coupled
//! non-negative CP factorization, model evaluation and graph export, and a
//! cached stage pipeline tying them together.
//!
//! With the default `parallel` feature, per-patient work runs on the rayon
//! pool. Reductions use fixed chunking, so results do not depend on the
//! thread count.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cohort;
pub mod embedding;
pub mod error;
pub mod factorization;
pub mod linalg;
pub mod logistic;
pub mod matching;
pub mod par;
pub mod pipeline;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
