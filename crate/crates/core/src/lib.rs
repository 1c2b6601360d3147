//! Desk-scale multi-domain nuclei segmentation: a small reverse-mode autodiff
//! engine, conditional gradient reversal for domain alignment, a frozen
//! transformer backbone with adapters, a sixteen-slice high-resolution
//! decoder, synthetic multi-domain data and the metrics used to score it.

pub mod align;
pub mod backbone;
pub mod decoder;
pub mod diagnostics;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use align::{AlignMode, DomainLabel, DomainWeights};
pub use decoder::DecoderMode;
pub use error::{Error, Result};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
