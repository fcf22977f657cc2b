//! Prompt-learning instance segmentation on a frozen ViT backbone.
//!
//! The crate implements two prompter variants that feed a compact promptable
//! mask decoder, three comparison pipelines that extend the same decoder, and
//! the shared machinery they stand on: an `f64` reverse-mode autodiff engine,
//! geometry and mask utilities, a synthetic-shapes dataset, a COCO-style AP
//! evaluator, and a deterministic training loop.

pub mod anchor;
pub mod baselines;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod encoder;
pub mod enhancer;
pub mod error;
pub mod geometry;
pub mod mask;
pub mod matching;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod query;
pub mod report;
pub mod sam;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Param, Reduction, Tensor};
