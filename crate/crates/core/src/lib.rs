//! Graph-based dependency parsing for low-resource, morphologically rich
//! languages, with encoders pretrained on auxiliary tagging tasks and fused
//! into a biaffine parser by a gate.
//!
//! The numeric core ([`autodiff`], MST decoding) is generic over
//! [`Scalar`]; models run in `f64` through the aliases below.

pub mod autodiff;
pub mod conllu;
pub mod error;
pub mod eval;
pub mod model_io;
pub mod nn;
pub mod parser;
pub mod pipelines;
pub mod rng;
pub mod scalar;
pub mod tagger;
pub mod tagschemes;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type used by all models.
pub type Real = f64;
pub type Tensor = autodiff::Tensor<Real>;
pub type ParameterStore = autodiff::ParameterStore<Real>;
pub type Graph<'s> = autodiff::Graph<'s, Real>;
pub type Gradients = autodiff::Gradients<Real>;
