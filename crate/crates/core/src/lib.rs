//! Query-encoder fine-tuning against a frozen document embedding index.
//!
//! Documents are embedded once and never change; only the query encoder is
//! trained, with a list-wise KL loss over retrieved candidate sets.

pub mod bench;
pub mod checkpoint;
pub mod corpus_io;
pub mod embed_store;
pub mod encoder;
pub mod error;
pub mod first_stage;
pub mod linalg;
pub mod metrics;
pub mod ranker;
pub mod synthlab;
pub mod trainer;

pub use error::{Error, Result};
