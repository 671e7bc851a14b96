//! Open-vocabulary object detection at desk scale.
//!
//! A ViT encoder and a prompt-guided Transformer decoder predict class-agnostic
//! boxes and per-prompt scores. A small dual encoder scores every box in one
//! masked-attention pass, and the two probability sources are ensembled with
//! separate weights for base and novel classes.

pub mod boxes;
pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
