//! Desk-scale video generation stack: causal video VAE, decoupled
//! spatial/temporal multimodal diffusion transformer, flow-matching training
//! and sampling, consistency distillation, reward alignment, a procedural
//! video corpus, and the orchestration runtime.

pub mod align;
pub mod autodiff;
pub mod codec;
pub mod conditioning;
pub mod datagen;
pub mod diffusion;
pub mod distill;
pub mod dit;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod runtime;
pub mod tensor;

pub use autodiff::Var;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
