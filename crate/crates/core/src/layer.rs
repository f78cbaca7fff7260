use serde::{Deserialize, Serialize};

use crate::attention::{gqa_forward, mla_forward_absorbed, GqaLayer, MlaLayer};
use crate::error::Result;
use crate::rewrite::{MergedGqaLayer, MlaFactorizedLayer, MqaLayer};
use crate::rorope::SplitKeyLayer;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Any layer that maps a `T × D` sequence to a `T × D` output.
pub trait AttentionLayer<T: Scalar> {
    fn hidden(&self) -> usize;

    /// Scalars cached per token when decoding.
    fn kv_scalars_per_token(&self) -> usize;

    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>>;
}

impl<T: Scalar> AttentionLayer<T> for GqaLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        GqaLayer::kv_scalars_per_token(self)
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        gqa_forward(self, x)
    }
}

impl<T: Scalar> AttentionLayer<T> for MergedGqaLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        MergedGqaLayer::kv_scalars_per_token(self)
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        MergedGqaLayer::forward(self, x)
    }
}

impl<T: Scalar> AttentionLayer<T> for MlaFactorizedLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        self.latent_dim()
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        MlaFactorizedLayer::forward(self, x)
    }
}

impl<T: Scalar> AttentionLayer<T> for MqaLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        self.latent_dim()
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        MqaLayer::forward(self, x)
    }
}

impl<T: Scalar> AttentionLayer<T> for SplitKeyLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        2 * self.groups * self.head_dim
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        SplitKeyLayer::forward(self, x)
    }
}

/// Runs the absorbed, cache-backed path.
impl<T: Scalar> AttentionLayer<T> for MlaLayer<T> {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn kv_scalars_per_token(&self) -> usize {
        MlaLayer::kv_scalars_per_token(self)
    }
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        mla_forward_absorbed(self, x).map(|(y, _)| y)
    }
}

/// The layer kinds a bundle can hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum AnyLayer<T> {
    Gqa(GqaLayer<T>),
    MergedGqa(MergedGqaLayer<T>),
    MlaFactorized(MlaFactorizedLayer<T>),
    Mla(MlaLayer<T>),
}

impl<T: Scalar> AnyLayer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyLayer::Gqa(_) => "gqa",
            AnyLayer::MergedGqa(_) => "merged_gqa",
            AnyLayer::MlaFactorized(_) => "mla_factorized",
            AnyLayer::Mla(_) => "mla",
        }
    }

    pub fn as_layer(&self) -> &dyn AttentionLayer<T> {
        match self {
            AnyLayer::Gqa(l) => l,
            AnyLayer::MergedGqa(l) => l,
            AnyLayer::MlaFactorized(l) => l,
            AnyLayer::Mla(l) => l,
        }
    }
}
