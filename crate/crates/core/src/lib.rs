//! Conditional image generation at desk scale: a condition-modulated expert
//! module, an interleaved control branch over a DiT-style backbone, a
//! flow-matching trainer, a procedural multi-condition corpus, and an
//! evaluation harness — all on a self-contained f64 tensor engine with
//! verifiable reverse-mode gradients.

pub mod comoe;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod model;
pub mod img;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod weavenet;

pub use error::TensorError;
pub use scalar::Scalar;

/// Default element type: 64-bit floats everywhere the model runs.
pub type Tensor = tensor::TensorBase<f64>;
/// Autodiff tape over [`Tensor`].
pub type Tape = tensor::tape::Tape<f64>;
/// Named parameter store over [`Tensor`].
pub type Params = tensor::params::Params<f64>;
/// Per-parameter gradients over [`Tensor`].
pub type GradientRecord = tensor::params::GradientRecord<f64>;
