//! Deep causal character-level transformer language models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff.
//! * [`model`]: the causal transformer, per-layer positional embeddings
//!   and per-(layer, offset) output classifiers.
//! * [`losses`]: multi-position, intermediate-layer and multi-target
//!   losses with their drop schedule.
//! * [`data`]: corpora, text8 cleaning, splits and window sampling.
//! * [`optim`], [`trainer`], [`checkpoint`]: optimisers, the training
//!   loop and the checkpoint format.
//! * [`evaluator`]: bits per character, accuracy and bpb→ppl.
//! * [`analysis`]: per-character traces, word completions, the copy
//!   probe and sampling.
//! * [`config`], [`cli`]: run configuration and the command-line entry.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LanguageModel, ModelConfig, TransformerLM};
pub use tensor::{Graph, Scalar, Tensor, Var};
