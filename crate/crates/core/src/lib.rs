//! Compact index-map coding for edge-to-cloud image classification.
//!
//! Images are tokenized on the edge by a vector-quantized autoencoder into a
//! grid of codebook indices. A learned scorer keeps only the most useful
//! indices, which are packed into a bitstream with a position mask. The cloud
//! side classifies straight from the received indices with a transformer
//! pretrained by masked token modeling.

pub mod bitstream;
pub mod error;
pub mod harness;
pub mod modeling;
pub mod nn;
pub mod selection;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{AdamConfig, Graph, ParamStore, Real, Tensor, Var};
