//! Cross-resolution knowledge distillation: a small autograd engine, CNN
//! layers, instance- and relation-level distillation, test-time BN
//! adaptation and a synthetic benchmark with its evaluation harness.

pub mod autograd;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod facebn;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod study;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
