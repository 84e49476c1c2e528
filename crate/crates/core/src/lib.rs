//! Semantic-aligned part embeddings for text-based person search.
//!
//! Two transformer encoders turn images and captions into unit features
//! with a leading global row. A K-head attention module shared by both
//! modalities pools each sample into K part embeddings. Training aligns
//! global and part embeddings across modalities with projection matching
//! and projection classification losses plus a head-diversity penalty;
//! retrieval sums global and per-part cosine similarities.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod retrieval;
pub mod safa;
pub mod train;

pub use error::{Error, Result};
