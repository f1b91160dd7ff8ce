//! Hallucination detection for LLM outputs: prompt construction, batched
//! inference against OpenAI-compatible endpoints, consistency-filtered weak
//! labels, per-task weighted voting, and checkpoint merging.
//!
//! The [`pipeline`] module ties the pieces together from a TOML config; the
//! [`mock`] module provides a deterministic local server for tests and dry
//! runs.

pub mod checkpoint;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod merge;
pub mod mock;
pub mod pipeline;
pub mod prompt;
pub mod synthetic;
pub mod vote;
pub mod weak;

pub use error::{Error, ErrorClass, Result};

// The guide's code blocks run as doctests through these otherwise empty
// modules, one per chapter so a failure points at its source file.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/weak-labels.md")]
    mod weak_labels {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/voting.md")]
    mod voting {}
    #[doc = include_str!("../../../book/src/merging.md")]
    mod merging {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
