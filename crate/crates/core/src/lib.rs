//! Chain-of-thought learning of sparse Boolean functions with a one-layer masked
//! attention model, fine-tuned either by immediate-reward policy ascent or by
//! supervised sign descent on self-generated chains.

pub mod acceptance;
pub mod attention_model;
pub mod boolean_task;
pub mod checks;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod rl_finetune;
pub mod sft_finetune;
pub mod trace;

pub use error::{Error, Result};
