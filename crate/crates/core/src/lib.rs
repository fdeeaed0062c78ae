//! Cross-architecture distillation for small dense passage retrievers.
//!
//! A shared transformer encoder produces both a single-vector (dual-encoder)
//! score and a multi-vector late-interaction score; a separate cross-encoder
//! scores concatenated pairs. The loss module distils cross → late → metric
//! interaction, and the trainer, retrieval and pipeline modules run the
//! experiments end to end on synthetic corpora.

pub mod config;
pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradchecks;
pub mod interaction;
pub mod losses;
pub mod pipeline;
pub mod retrieval;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
