//! Context-guided triple matching for multiple-choice question answering.
//!
//! A question instance is a triple of passage, question, and candidate
//! answer. Each candidate is scored by three context-guided matching
//! branches (each entity takes a turn as the background context for the
//! other two), and training combines a selection loss with a contrastive
//! regularizer whose positives come from a second dropout draw of the gold
//! candidate.
//!
//! The crate ships its own small dense-tensor tape autodiff, a toy
//! trainable encoder (plus a loader for precomputed embeddings), pairwise
//! matching baselines, dataset parsing with sliding-window splitting, a
//! deterministic training/evaluation harness, and a finite-difference
//! gradient verifier.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CtmError, Result};
pub use graph::{Graph, Var};
pub use model::{CtmConfig, CtmModel};
pub use rng::RngState;
pub use tensor::{Real, Tensor};
