//! Degrade a small transformer, then recover it with low-rank adapters
//! trained by distillation on teacher-generated text.

pub mod autodiff;
pub mod corpus;
pub mod degrade;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lora;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod syndata;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
