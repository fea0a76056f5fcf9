//! Two-level long-document classification.
//!
//! Documents are cut into overlapping word chunks. A small transformer is
//! fine-tuned on chunks carrying their document label, and its `[CLS]`
//! vectors become the input of a document-level encoder. Chunk vectors are
//! also reduced with a parametric UMAP network and clustered with HDBSCAN;
//! cluster ids are fed to the document encoder as extra features.

pub mod chunk_encoder;
pub mod clusterer;
pub mod config;
pub mod corpus;
pub mod doc_encoder;
pub mod error;
pub mod evalx;
pub mod nn;
pub mod pipeline;
pub mod reducer;
pub mod store;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{CoreError, Result};
