//! Hierarchical generative slate recommendation.
//!
//! Pipeline: synthetic world → contrastive residual-quantized tokenizer →
//! hierarchical slate decoder pretraining → listwise preference alignment →
//! greedy-slate/beam-item inference → ranking metrics and efficiency bench.

pub mod checkpoint;
pub mod config;
pub mod crqvae;
pub mod error;
pub mod evalbench;
pub mod formats;
pub mod gsbi;
pub mod hsd;
pub mod orpo;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tensor;

pub use crqvae::SemanticID;
pub use error::{HigrError, Result};
