//! Minimal reverse-mode autodiff over dense matrices, with the transformer
//! and convolution blocks needed by the picking policy. Everything is generic
//! over [`Real`] so the same model runs in `f32` for training and `f64` for
//! finite-difference checks.

pub mod graph;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod scalar;

pub use graph::{AttnGeom, ConvGeom, Grads, Graph, Var};
pub use layers::{ConvBlock, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Real;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("weight blob: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
