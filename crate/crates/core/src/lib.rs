//! Reaction-diffusion latent dynamics for video world modelling.

pub mod analysis;
pub mod autodiff;
pub mod belief;
pub mod bio;
pub mod codec;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod matrix;
pub mod model;
pub mod scalar;
pub mod training;

pub use error::{FluidError, Result};
pub use field::{ChannelVector, FieldGrid};
pub use scalar::Scalar;

pub type FieldGridF32 = FieldGrid<f32>;
pub type FieldGridF64 = FieldGrid<f64>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
