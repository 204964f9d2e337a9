//! Small, dependency-light neural-network toolkit: dense `f64` matrices, a
//! reverse-mode autodiff tape, transformer building blocks, AdamW, and a
//! single-file checkpoint container.
//!
//! Everything runs on the CPU in double precision so that analytic gradients
//! can be checked against finite differences.

mod error;
pub mod graph;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use error::NnError;
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    positional_encoding, sinusoidal_embedding, CrossAttentionBlock, LayerNorm, Linear, Mlp,
    MultiHeadAttention, TransformerBlock,
};
pub use matrix::Matrix;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{Manifest, ManifestParam, ParamId, ParamStore};
