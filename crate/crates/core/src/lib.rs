//! Cross-modal recipe and food-image embeddings with latent-variable
//! coupling between the two encoders.
//!
//! Computation is generic over the scalar type ([`scalar::Scalar`], `f32` or
//! `f64`); the aliases below fix the common choices.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image_encoder;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod recipe;
pub mod scalar;
pub mod trainer;
pub mod viz;

pub use error::{Error, ErrorKind, Result};
pub use model::{Mcen, ModelConfig, Variant};
pub use scalar::{DType, Scalar};

pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Params32 = params::ParamStore<f32>;
pub type Params64 = params::ParamStore<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
