//! Whole-slide image grading with a region transformer: synthetic slides and
//! tiling, a ResNet-18 patch encoder, masked feature pre-training, slide-level
//! fine-tuning on averaged class tokens, evaluation with bootstrap intervals
//! and attention overlays. All numerics run on the in-crate reverse-mode
//! tensor engine.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod tensor;
pub mod wsi;
pub mod metrics;
pub mod features;
pub mod transformer;
pub mod pipeline;
pub mod viz;
pub mod experiment;
pub mod cli;

mod error;

pub use error::Error;
