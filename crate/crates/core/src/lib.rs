//! Multi-task pre-finetuning workbench for compact transformer encoders.
//!
//! The crate trains a small post-LN encoder with two pre-finetuning
//! objectives (InfoNCE over text pairs, token cross-entropy over pseudo
//! labels), keeps per-task LoRA groups whose gradients come only from their
//! own task, and ships the diagnostics and downstream protocols used to
//! compare training strategies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod lora;
pub mod objectives;
pub mod params;
pub mod pseudo_label;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
