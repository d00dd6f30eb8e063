//! Kronecker-product adapters for parameter-efficient fine-tuning.
//!
//! The numeric core is generic over the scalar type ([`Scalar`] is
//! implemented for `f32` and `f64`); the aliases below fix it for the common
//! cases.

pub mod adapters;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod kron;
pub mod matrix;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::{Precision, Scalar};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Graph64<'a> = autograd::Graph<'a, f64>;
pub type Graph32<'a> = autograd::Graph<'a, f32>;
pub type KronFactorPair64 = kron::KronFactorPair<f64>;
pub type KronFactorPair32 = kron::KronFactorPair<f32>;
pub type AdapterState64 = adapters::AdapterState<f64>;
pub type AdapterState32 = adapters::AdapterState<f32>;
pub type EncoderModel64 = model::EncoderModel<f64>;
pub type EncoderModel32 = model::EncoderModel<f32>;
