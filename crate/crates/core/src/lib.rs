//! Multi-granularity spatial-temporal transformer for multichannel
//! time-series classification, with the preprocessing, augmentation,
//! training and subject-level evaluation protocol around it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod attention;
pub mod augment;
pub mod embedding;
mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
mod scalar;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Recording64 = signal::Recording<f64>;
pub type Segment64 = signal::Segment<f64>;
pub type AdFormer64 = model::AdFormer<f64>;
pub type AdFormer32 = model::AdFormer<f32>;
