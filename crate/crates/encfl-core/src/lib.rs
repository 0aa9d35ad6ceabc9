//! Encrypted federated learning for network intrusion detection.
//!
//! The crate is organized around a leveled CKKS-style approximate
//! homomorphic encryption core (`ckks`), SIMD tensor packing and
//! polynomial activation machinery on top of it (`tensor`), a small
//! MLP that trains both in the clear and under encryption (`nn`), and
//! a federated learning simulator (`fl`) in which vehicle units keep
//! their secret key coalition-side while a central server trains on
//! ciphertexts it can never read.
//!
//! Supporting modules: `data` (CSV ingestion, rebalancing, scaling,
//! sharding, synthetic generation), `metrics` (confusion-matrix
//! derived scores), `config` (experiment files), and `model_io`
//! (checkpoints).

pub mod ckks;
pub mod cli;
pub mod config;
pub mod data;
pub mod fl;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod tensor;
pub mod verify;
