//! Batch pipeline behind the `vcc` command: feature extraction with a
//! content-hash cache, WSOLA augmentation, pair bookkeeping, model training
//! and conversion.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod workspace;

pub use config::PipelineConfig;
pub use error::PipelineError;
