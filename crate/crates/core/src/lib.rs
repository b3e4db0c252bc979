//! Fully test-time adaptation of frozen classifiers by entropy minimization
//! over channel-wise affine modulation and normalization statistics.
//!
//! The numerical core is generic over [`Scalar`]; the aliases below fix it
//! to `f32`, the storage type everything on disk uses.

pub mod adapt;
pub mod corrupt;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod netmodels;

pub use diffcore::{Scalar, Tensor};
pub use error::{Error, Result};

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tape32 = diffcore::Tape<f32>;
pub type Gradients32 = diffcore::Gradients<f32>;
pub type NormStats32 = diffcore::NormStats<f32>;
pub type BatchNormState32 = diffcore::BatchNormState<f32>;
pub type Network32 = netmodels::Network<f32>;
pub type ModulationSet32 = adapt::ModulationSet<f32>;
