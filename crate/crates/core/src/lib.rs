//! Denoising and debiasing for dynamic scene graph generation.
//!
//! The crate is generic over the floating point type through [`Scalar`];
//! the aliases below fix it to `f64` (the default everywhere) or `f32`.

pub mod ablation;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod dtrans;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod model;
pub mod report;
pub mod scalar;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
