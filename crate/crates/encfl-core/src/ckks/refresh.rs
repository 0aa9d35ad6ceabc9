//! Ciphertext refresh by re-encryption.
//!
//! True bootstrapping is out of scope; instead a ciphertext is sent to
//! a party holding the secret key, decrypted, and re-encrypted at the
//! top level. The provider speaks serialized bytes on both sides so
//! traffic is measurable, and the re-encryption seed is derived from
//! the request bytes, so a refresh is a deterministic function of the
//! ciphertext and the holder's base seed.

use sha2::{Digest, Sha256};

use super::cipher::{decrypt_values, encrypt, Ciphertext};
use super::encoding::encode;
use super::keys::{KeySet, SecretKey};
use super::params::{CkksError, CkksParams};
use super::serial::{deserialize_ciphertext, serialize_ciphertext};

/// Who performs the decrypt-and-re-encrypt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshMode {
    /// A key-holding participant services requests over the wire.
    KeyHolderInteractive,
    /// An in-process holder, for tests and single-party runs.
    TestOracle,
}

/// Anything that can turn a serialized ciphertext into a fresh one.
pub trait RecryptService {
    fn recrypt(&self, request: &[u8]) -> Result<Vec<u8>, CkksError>;
}

/// A secret-key holder that services refreshes.
pub struct KeyHolder {
    params: std::sync::Arc<CkksParams>,
    sk: SecretKey,
    keys: std::sync::Arc<KeySet>,
    base_seed: u64,
}

impl KeyHolder {
    pub fn new(
        params: std::sync::Arc<CkksParams>,
        sk: SecretKey,
        keys: std::sync::Arc<KeySet>,
        base_seed: u64,
    ) -> Self {
        KeyHolder { params, sk, keys, base_seed }
    }
}

/// Encryption seed bound to the request: deterministic per ciphertext,
/// distinct across ciphertexts and holders.
pub fn derive_seed(base_seed: u64, request: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(request);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl RecryptService for KeyHolder {
    fn recrypt(&self, request: &[u8]) -> Result<Vec<u8>, CkksError> {
        let ct = deserialize_ciphertext(request, &self.params)?;
        let values = decrypt_values(&ct, &self.sk, &self.params)?;
        let pt = encode(&values, self.params.scale, self.params.max_level, &self.params)?;
        let seed = derive_seed(self.base_seed, request);
        let fresh = encrypt(&pt, &self.keys, &self.params, seed)?;
        Ok(serialize_ciphertext(&fresh, &self.params))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefreshStats {
    pub calls: u64,
    pub request_bytes: u64,
    pub response_bytes: u64,
}

/// Routes refreshes to a service and keeps traffic counters.
pub struct RefreshProvider {
    pub mode: RefreshMode,
    service: Box<dyn RecryptService>,
    stats: RefreshStats,
}

impl RefreshProvider {
    pub fn test_oracle(
        params: std::sync::Arc<CkksParams>,
        sk: SecretKey,
        keys: std::sync::Arc<KeySet>,
        base_seed: u64,
    ) -> Self {
        RefreshProvider {
            mode: RefreshMode::TestOracle,
            service: Box::new(KeyHolder::new(params, sk, keys, base_seed)),
            stats: RefreshStats::default(),
        }
    }

    pub fn interactive(service: Box<dyn RecryptService>) -> Self {
        RefreshProvider {
            mode: RefreshMode::KeyHolderInteractive,
            service,
            stats: RefreshStats::default(),
        }
    }

    pub fn refresh(
        &mut self,
        ct: &Ciphertext,
        params: &CkksParams,
    ) -> Result<Ciphertext, CkksError> {
        let request = serialize_ciphertext(ct, params);
        let response = self.service.recrypt(&request)?;
        self.stats.calls += 1;
        self.stats.request_bytes += request.len() as u64;
        self.stats.response_bytes += response.len() as u64;
        let fresh = deserialize_ciphertext(&response, params)?;
        if fresh.level != params.max_level {
            return Err(CkksError::Refresh(format!(
                "service returned level {} instead of {}",
                fresh.level, params.max_level
            )));
        }
        Ok(fresh)
    }

    pub fn stats(&self) -> RefreshStats {
        self.stats
    }
}
