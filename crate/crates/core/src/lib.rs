//! Distant-supervision relation extraction with a piecewise convolutional
//! encoder, fine-grained intra-sentence attention and threshold-gated bag
//! attention.
//!
//! Every differentiable computation runs on the small reverse-mode engine in
//! [`autodiff`], in 64-bit floats, so the whole model can be checked against
//! finite differences.

pub mod autodiff;
pub mod bag_attention;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use config::ModelConfig;
pub use model::Model;
pub use tensor::Tensor;
