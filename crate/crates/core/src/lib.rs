//! Block-level depth pruning for small decoder-only language models.
//!
//! The crate covers a reverse-mode tape autograd, a LLaMA-style decoder with
//! a KV-cached decoder, byte-level corpora, unit importance scoring, pruning
//! surgery, training loops and perplexity/latency evaluation.

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod importance;
pub mod kernels;
pub mod model;
pub mod pruner;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, UnitKind, UnitRef};
pub use tensor::{Scalar, Tensor};
