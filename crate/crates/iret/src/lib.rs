//! Instance-level image retrieval toolkit.
//!
//! Pipeline: images -> convolutional encoder -> feature aggregation
//! (MAC/SPoC/GeM/R-MAC/CroW) -> L2 + PCA whitening + L2 -> exhaustive
//! cosine retrieval -> mAP evaluation. Training combines contrastive
//! (NT-Xent) pre-training with a quantized average-precision fine-tune.

pub mod aggregate;
pub mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod whiten;

pub use error::{Error, Result};
