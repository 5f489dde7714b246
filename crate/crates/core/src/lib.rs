//! Facade-image fireproof-risk pipeline.
//!
//! Ingest and filter property metadata, deduplicate facade images by
//! perceptual hash, split by property, train a multi-task network for
//! construction year, building structure and property type, derive the
//! fireproof class H/T/M by rule, and evaluate.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dedup;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod rules;
pub mod synthgen;

pub use error::{Error, Result};
