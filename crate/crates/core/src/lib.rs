//! Differentiable BERT-style encoder, Hidden Token Attribution, and the
//! statistics used to compare attention with attribution.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Attribution is
//! meant to run in `f64`; the aliases below fix that precision.

pub mod analysis;
pub mod archive;
pub mod attribution;
mod error;
pub mod graph;
pub mod model;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type GraphF64 = graph::Graph<f64>;
pub type ModelWeightsF64 = model::ModelWeights<f64>;
pub type EncoderTraceF64 = model::EncoderTrace<f64>;
pub type ContributionMatrixF64 = attribution::ContributionMatrix<f64>;
pub type RelPosHistogramF64 = analysis::RelPosHistogram<f64>;
pub type HeadCorrelationSummaryF64 = analysis::HeadCorrelationSummary<f64>;
