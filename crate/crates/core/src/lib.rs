//! Multi-task question embeddings.
//!
//! A Siamese mean-pooled encoder trained with a contrastive loss (labeled
//! pairs) and an in-batch multiple-negatives loss (positive pairs), under a
//! one-by-one or round-robin task curriculum. Trained models are used
//! through cosine similarity: exact top-k retrieval, and classification
//! with a per-task calibrated threshold.
//!
//! Per-sequence work (encoding a batch, embedding a corpus, scoring a
//! query against an index) runs on rayon when the `parallel` feature is on.
//! Results are combined in input order, so both modes agree bit for bit.

pub mod calibration;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod jsonl;
pub mod losses;
pub mod retrieval;
pub mod synthetic;
pub mod textproc;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
