//! Desk-scale LoRA-from-prompt prediction.
//!
//! A tiny 2D flow-matching model stands in for a visual foundation model.
//! Ground-truth LoRA adapters are fine-tuned per task, their relative-change
//! response maps are extracted, and a two-stage transformer hypernetwork
//! learns to predict full LoRA factors from a text condition: Stage-I
//! predicts the binary response map, Stage-II predicts the (B, A) factors
//! guided by Stage-I features.

pub mod container;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hypernet;
pub mod lorakit;
pub mod optim;
pub mod plot;
pub mod responsemap;
pub mod taskgen;
pub mod toybase;
pub mod trainer;
pub mod util;

pub use error::{LofaError, Result};
