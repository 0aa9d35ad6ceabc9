//! Leveled approximate homomorphic encryption over Z_q\[X\]/(X^R + 1).
//!
//! Plaintext vectors of up to R/2 reals are embedded into polynomial
//! coefficients through the canonical embedding at a fixed scale Δ,
//! encrypted under an RLWE key pair, and manipulated slot-wise:
//! addition, multiplication (with relinearization and one rescale per
//! product), slot rotation through Galois automorphisms, and an
//! explicit refresh that stands in for bootstrapping. Coefficients are
//! carried in RNS form, one word-sized prime per level plus one
//! special prime reserved for key switching.

pub mod arith;
pub mod cipher;
pub mod encoding;
pub mod keys;
pub mod ntt;
pub mod params;
pub mod poly;
pub mod refresh;
pub mod serial;

pub use cipher::Ciphertext;
pub use encoding::Plaintext;
pub use keys::{KeySet, PublicKey, SecretKey};
pub use params::{CkksError, CkksParams, Profile};
pub use refresh::{RefreshMode, RefreshProvider};
