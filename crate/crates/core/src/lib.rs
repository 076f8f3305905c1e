//! Core library for a desk-scale three-stage RLHF pipeline: tensors and
//! autodiff, a small GPT, datasets, a hybrid train/infer engine and the
//! SFT, reward-model and PPO stages.

pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
