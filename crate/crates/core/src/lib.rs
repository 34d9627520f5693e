//! Trimodal solar power forecasting, built from scratch:
//! a reverse-mode autodiff tensor library, rotary-position attention,
//! residual vector quantization with EMA codebooks, the fusion forecaster,
//! naive baselines, a synthetic trimodal dataset generator, and an
//! evaluation harness with difficulty splits and zero-shot protocols.

pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod rope;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
