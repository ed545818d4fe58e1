//! Parameter-efficient few-shot fine-tuning of Vision Transformers.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod archive;
pub mod data;
pub mod finetune;
pub mod peft;
pub mod prefit;
mod error;
pub mod rng;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
