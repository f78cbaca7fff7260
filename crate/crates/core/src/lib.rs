//! Conversion of grouped-query attention layers into multi-head latent
//! attention layers, with exact-equivalence checks for every stage.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common `f64` instantiations.

pub mod attention;
pub mod bench;
pub mod bkv;
pub mod error;
pub mod io;
pub mod layer;
pub mod linalg;
pub mod pipeline;
pub mod report;
pub mod rewrite;
pub mod rorope;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use layer::{AnyLayer, AttentionLayer};
pub use scalar::{Dtype, Scalar};
pub use tensor::Matrix;

pub type Mat64 = tensor::Matrix<f64>;
pub type Mat32 = tensor::Matrix<f32>;
pub type Gqa64 = attention::GqaLayer<f64>;
pub type Gqa32 = attention::GqaLayer<f32>;
pub type Mla64 = attention::MlaLayer<f64>;
pub type Mla32 = attention::MlaLayer<f32>;
pub type Merged64 = rewrite::MergedGqaLayer<f64>;
pub type Split64 = rorope::SplitKeyLayer<f64>;
pub type FreqStats64 = rorope::FreqStats<f64>;
pub type RotationSet64 = rorope::RotationSet<f64>;
