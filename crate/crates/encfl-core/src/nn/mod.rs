//! Multilayer perceptron, twice: a plaintext reference trainer and an
//! encrypted trainer over packed ciphertexts.
//!
//! Both sides run the same network. Activations are row vectors, a
//! layer computes y = x·W + b with W stored in-dim × out-dim, and the
//! nonlinearity is SiLU or a fixed polynomial surrogate of it. The
//! plaintext side can evaluate either form; the encrypted side only
//! ever sees the surrogate, so congruence tests run the plaintext
//! model with the surrogate too and the remaining gap is decryption
//! noise alone.

pub mod enc;
pub mod plain;

use thiserror::Error;

use crate::ckks::CkksError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("model has no layers")]
    Empty,
    #[error("layer {layer}: {what} is {got}, expected {want}")]
    Shape { layer: usize, what: &'static str, want: usize, got: usize },
    #[error("bad hyperparameter: {0}")]
    Hyper(String),
    #[error(transparent)]
    Ckks(#[from] CkksError),
}

pub use enc::{EncGradients, EncModel, EncTrace};
pub use plain::{Activation, Gradients, LayerSpec, PlainModel, PolyAct, TrainConfig};
