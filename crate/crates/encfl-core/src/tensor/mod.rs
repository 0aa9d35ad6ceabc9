//! Packing tensors into ciphertext slots and computing on them.
//!
//! Slots form a grid: with stride μ, slot r·μ + c is row r, column c.
//! Matrices flatten row-major onto the grid (optionally transposed),
//! vectors are replicated along one grid axis, and matrix-vector
//! products become one slot-wise multiply plus log-many rotations.
//! Polynomial activations evaluate through a balanced product tree.

pub mod cheb;
pub mod matvec;
pub mod pack;

pub use cheb::ChebFit;
pub use pack::{EncMatrix, EncVector, PackLayout, PackedMatrix, PackedVector, Replication};
