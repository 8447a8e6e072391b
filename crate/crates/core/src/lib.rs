//! Span-uncertainty scored contrastive training for chunk retrieval.
//!
//! Pipeline: chunk a corpus, index it with BM25, score chunk pairs with an
//! LLM log-probability backend, turn low/high span uncertainty into
//! positives/hard negatives, train a small encoder with InfoNCE, and retrieve
//! with inner products.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod lexical_index;
pub mod par;
pub mod provider;
pub mod retrieval;
pub mod sampling;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, ProviderError, Result};
pub use par::Execution;
