//! Embedding providers and the reference trainable encoder.

pub mod checkpoint;
pub mod mlp;
pub mod rotation;
pub mod train;

use crate::dataset::{Payload, PayloadKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use checkpoint::{decode_encoder, encode_encoder, load_encoder, save_encoder};
pub use mlp::{forward_loss, sgd_step, Architecture, Dense, EncoderParams, LossOutput, Scalar};
pub use rotation::{augment_with_rotations, rotate, AugmentedBatch, RotationLabel};
pub use train::{train_epochs, train_epochs_from, BatchSource, ClassIndex, PreparedBatch, SamplingSource, TrainHyper, TrainRound};

/// Anything that maps payloads to embedding rows.
pub trait EmbeddingProvider {
    fn embed(&self, payloads: &[&Payload]) -> Result<Matrix<f64>>;
}

/// A worker's encoder: either passthrough over precomputed embeddings or
/// the reference MLP.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity,
    Mlp(EncoderParams<f32>),
}

impl Encoder {
    pub fn params(&self) -> Option<&EncoderParams<f32>> {
        match self {
            Encoder::Identity => None,
            Encoder::Mlp(p) => Some(p),
        }
    }
}

/// Stacks flat payload values into an `n x dim` matrix.
pub fn payload_matrix(payloads: &[&Payload]) -> Result<Matrix<f32>> {
    let dim = payloads.first().map_or(0, |p| p.values().len());
    Matrix::from_rows(&payloads.iter().map(|p| p.values()).collect::<Vec<_>>(), dim)
}

impl EmbeddingProvider for Encoder {
    fn embed(&self, payloads: &[&Payload]) -> Result<Matrix<f64>> {
        match self {
            Encoder::Identity => {
                if let Some(p) = payloads.iter().find(|p| p.kind() != PayloadKind::Embedding) {
                    return Err(Error::Shape(format!(
                        "identity provider needs embedding payloads, got {:?}",
                        p.kind()
                    )));
                }
                Ok(payload_matrix(payloads)?.map(f64::from))
            }
            Encoder::Mlp(params) => {
                if payloads.is_empty() {
                    return Ok(Matrix::zeros(0, params.embedding_dim()));
                }
                Ok(params.embed(&payload_matrix(payloads)?)?.map(f64::from))
            }
        }
    }
}

impl EmbeddingProvider for EncoderParams<f32> {
    fn embed(&self, payloads: &[&Payload]) -> Result<Matrix<f64>> {
        if payloads.is_empty() {
            return Ok(Matrix::zeros(0, self.embedding_dim()));
        }
        Ok(EncoderParams::embed(self, &payload_matrix(payloads)?)?.map(f64::from))
    }
}
