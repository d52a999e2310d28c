//! Sequence tagging with language-model embeddings.

#![allow(clippy::needless_range_loop, clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod crf;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod langmodel;
pub mod layers;
pub mod persist;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tagger;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{clip_gradients, GradBuffer, Gradients, Graph, ParamId, ParamStore, Var};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type LanguageModel32 = langmodel::LanguageModel<f32>;
pub type LanguageModel64 = langmodel::LanguageModel<f64>;
pub type TaggerModel32 = tagger::TaggerModel<f32>;
pub type TaggerModel64 = tagger::TaggerModel<f64>;
