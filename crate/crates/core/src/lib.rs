//! Knowledge-graph question answering pipeline: semantic path sampling,
//! dynamic beam-search retrieval with answer-type filtering, relation-level
//! preference data construction, answer-centered prompts and evaluation.
//!
//! Everything stops short of updating language-model weights: the crate
//! emits training records and evaluates objectives through small ports
//! ([`embedding::Embedder`], [`preference::PolicyPort`]).

pub mod embedding;
pub mod error;
pub mod eval;
pub mod kg;
pub mod preference;
pub mod prompt;
pub mod records;
pub mod retriever;
pub mod sampler;
pub mod type_predictor;

pub use error::{Error, Result};
