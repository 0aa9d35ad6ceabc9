//! Parameter sets for the leveled scheme.
//!
//! A parameter set fixes the ring dimension R, an RNS modulus chain
//! q_0 > 4Δ with rescale primes q_1..q_L each within a factor of two of
//! the scale Δ, and one key-switch prime P larger than every chain
//! prime. Level ℓ works modulo Q_ℓ = q_0·…·q_ℓ; each multiplication
//! divides by the current top prime, so the chain length bounds the
//! multiplicative depth between refreshes. P never carries data: it
//! only gives key-switching enough headroom that the switch noise
//! rounds away in the division by P.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::arith::{inv_mod, next_ntt_prime, prev_ntt_prime, shoup_precompute};
use super::encoding::EmbedTable;
use super::ntt::NttTable;

#[derive(Debug, Error)]
pub enum CkksError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{len} values exceed {slots} available slots")]
    EncodeCapacity { len: usize, slots: usize },
    #[error("non-finite input rejected")]
    NonFinite,
    #[error("operation needs level {needed} but ciphertext is at level {level}")]
    LevelExhausted { needed: usize, level: usize },
    #[error("scale mismatch: {left:e} vs {right:e}")]
    ScaleMismatch { left: f64, right: f64 },
    #[error("no rotation key for step {step} or its power-of-two decomposition")]
    MissingRotationKey { step: usize },
    #[error("noise budget exhausted ({bits:.1} bits)")]
    NoiseBudget { bits: f64 },
    #[error("operands come from different parameter sets (hash check)")]
    ParamsMismatch,
    #[error("malformed data: {0}")]
    Format(String),
    #[error("refresh failed: {0}")]
    Refresh(String),
}

/// Named parameter presets, ordered by ring size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// R = 32: near-instant, for algebra unit tests only.
    Toy,
    /// R = 256: fast integration tests with a non-square slot grid.
    Test,
    /// R = 2048: the default. Full pipeline at interactive speed.
    Desk,
    /// R = 16384: ring large enough that the total modulus fits the
    /// usual 128-bit lattice budget. A sizing preset, not a certified
    /// configuration.
    SecureDemo,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Test => "test",
            Profile::Desk => "desk",
            Profile::SecureDemo => "secure-demo",
        }
    }

    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "toy" => Some(Profile::Toy),
            "test" => Some(Profile::Test),
            "desk" => Some(Profile::Desk),
            "secure-demo" => Some(Profile::SecureDemo),
            _ => None,
        }
    }
}

impl serde::Serialize for Profile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Profile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Profile, D::Error> {
        let s = String::deserialize(d)?;
        Profile::parse(&s).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown profile {s:?}, expected toy, test, desk or secure-demo"
            ))
        })
    }
}

pub struct CkksParams {
    pub ring_dim: usize,
    /// modulus_chain[ℓ] is the prime introduced at level ℓ.
    pub modulus_chain: Vec<u64>,
    /// Special prime P for hybrid key switching, outside the chain.
    pub ks_prime: u64,
    /// Fixed-point scale Δ.
    pub scale: f64,
    pub max_level: usize,
    /// Ciphertexts at or below this level should be refreshed before
    /// further multiplications.
    pub refresh_threshold: usize,
    ntt_chain: Vec<NttTable>,
    ntt_ks: NttTable,
    /// rescale_inv[ℓ][i] = (inv(q_ℓ) mod q_i, shoup), i < ℓ.
    rescale_inv: Vec<Vec<(u64, u64)>>,
    /// (inv(P) mod q_i, shoup) per chain prime.
    ks_inv: Vec<(u64, u64)>,
    /// (P mod q_i, shoup) per chain prime.
    ks_mod: Vec<(u64, u64)>,
    embed: EmbedTable,
    hash: [u8; 32],
}

impl std::fmt::Debug for CkksParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CkksParams")
            .field("ring_dim", &self.ring_dim)
            .field("modulus_chain", &self.modulus_chain)
            .field("ks_prime", &self.ks_prime)
            .field("scale", &self.scale)
            .field("max_level", &self.max_level)
            .field("refresh_threshold", &self.refresh_threshold)
            .finish()
    }
}

impl CkksParams {
    pub fn new(
        ring_dim: usize,
        modulus_chain: Vec<u64>,
        ks_prime: u64,
        scale: f64,
        refresh_threshold: usize,
    ) -> Result<CkksParams, CkksError> {
        let fail = |m: String| Err(CkksError::InvalidParams(m));
        if !ring_dim.is_power_of_two() {
            return fail("ring_dimension not a power of two".into());
        }
        if ring_dim < 8 {
            return fail("ring_dimension below minimum 8".into());
        }
        if modulus_chain.is_empty() {
            return fail("modulus chain empty".into());
        }
        let two_r = 2 * ring_dim as u64;
        let mut seen = modulus_chain.clone();
        seen.push(ks_prime);
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return fail("chain and key-switch primes must be distinct".into());
        }
        for &q in modulus_chain.iter().chain(std::iter::once(&ks_prime)) {
            if !super::arith::is_prime(q) {
                return fail(format!("modulus {q} is not prime"));
            }
            if q % two_r != 1 {
                return fail(format!("modulus {q} != 1 mod {two_r} (NTT-incompatible)"));
            }
            if q >= 1 << 62 {
                return fail(format!("modulus {q} exceeds the 62-bit arithmetic bound"));
            }
        }
        if !(scale.is_finite() && scale > 0.0) {
            return fail("scale not finite and positive".into());
        }
        if scale < (1u64 << 20) as f64 {
            return fail("scale below minimum 2^20".into());
        }
        if scale > modulus_chain[0] as f64 / 4.0 {
            return fail("scale exceeds a quarter of the level-0 modulus".into());
        }
        for &q in &modulus_chain[1..] {
            let ratio = q as f64 / scale;
            if !(0.5..=2.0).contains(&ratio) {
                return fail(format!(
                    "rescale prime {q} differs from scale by more than a factor of 2"
                ));
            }
        }
        if ks_prime <= *modulus_chain.iter().max().unwrap() {
            return fail("key-switch prime must exceed every chain prime".into());
        }
        let max_level = modulus_chain.len() - 1;
        if refresh_threshold > max_level {
            return fail("refresh threshold exceeds max level".into());
        }

        let ntt_chain = modulus_chain.iter().map(|&q| NttTable::new(q, ring_dim)).collect();
        let ntt_ks = NttTable::new(ks_prime, ring_dim);
        let rescale_inv = (0..modulus_chain.len())
            .map(|l| {
                (0..l)
                    .map(|i| {
                        let qi = modulus_chain[i];
                        let w = inv_mod(modulus_chain[l] % qi, qi);
                        (w, shoup_precompute(w, qi))
                    })
                    .collect()
            })
            .collect();
        let ks_inv = modulus_chain
            .iter()
            .map(|&qi| {
                let w = inv_mod(ks_prime % qi, qi);
                (w, shoup_precompute(w, qi))
            })
            .collect();
        let ks_mod = modulus_chain
            .iter()
            .map(|&qi| {
                let w = ks_prime % qi;
                (w, shoup_precompute(w, qi))
            })
            .collect();

        let mut h = Sha256::new();
        h.update(b"ckks-params-v1");
        h.update((ring_dim as u64).to_le_bytes());
        h.update((modulus_chain.len() as u64).to_le_bytes());
        for &q in &modulus_chain {
            h.update(q.to_le_bytes());
        }
        h.update(ks_prime.to_le_bytes());
        h.update(scale.to_bits().to_le_bytes());
        h.update((refresh_threshold as u64).to_le_bytes());
        let hash = h.finalize().into();

        Ok(CkksParams {
            ring_dim,
            modulus_chain,
            ks_prime,
            scale,
            max_level,
            refresh_threshold,
            ntt_chain,
            ntt_ks,
            rescale_inv,
            ks_inv,
            ks_mod,
            embed: EmbedTable::new(ring_dim),
            hash,
        })
    }

    pub fn profile(p: Profile) -> CkksParams {
        let (r, log_q0, log_scale, rescale_count, log_ks) = match p {
            Profile::Toy => (32usize, 50u32, 30u32, 4usize, 51u32),
            Profile::Test => (256, 59, 40, 5, 60),
            Profile::Desk => (2048, 59, 40, 5, 60),
            Profile::SecureDemo => (16384, 59, 40, 7, 60),
        };
        let two_r = 2 * r as u64;
        let mut chain = vec![next_ntt_prime(1 << log_q0, two_r)];
        chain.extend(balanced_primes(1u64 << log_scale, rescale_count, two_r));
        let ks = next_ntt_prime(1 << log_ks, two_r);
        CkksParams::new(r, chain, ks, (1u64 << log_scale) as f64, 1)
            .expect("preset parameters validate")
    }

    pub fn slots(&self) -> usize {
        self.ring_dim / 2
    }

    /// Primes active at the given level, lowest first.
    pub fn primes(&self, level: usize) -> &[u64] {
        &self.modulus_chain[..=level]
    }

    pub fn q(&self, level: usize) -> u64 {
        self.modulus_chain[level]
    }

    pub fn ntt(&self, idx: usize) -> &NttTable {
        &self.ntt_chain[idx]
    }

    pub fn ntt_tables(&self, level: usize) -> Vec<&NttTable> {
        self.ntt_chain[..=level].iter().collect()
    }

    pub fn ntt_ks(&self) -> &NttTable {
        &self.ntt_ks
    }

    pub fn rescale_inv(&self, level: usize, i: usize) -> (u64, u64) {
        self.rescale_inv[level][i]
    }

    pub fn ks_inv(&self, i: usize) -> (u64, u64) {
        self.ks_inv[i]
    }

    pub fn ks_mod(&self, i: usize) -> (u64, u64) {
        self.ks_mod[i]
    }

    pub fn embed(&self) -> &EmbedTable {
        &self.embed
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    /// log2 of the full modulus product including the key-switch prime.
    pub fn log_qp(&self) -> f64 {
        self.modulus_chain
            .iter()
            .chain(std::iter::once(&self.ks_prime))
            .map(|&q| (q as f64).log2())
            .sum()
    }
}

/// Primes ≡ 1 mod `two_r` alternating just above and just below
/// `target`, so products of consecutive primes stay close to powers of
/// `target` and rescaling drift cancels instead of compounding.
fn balanced_primes(target: u64, count: usize, two_r: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut above = target + 1;
    let mut below = target - 1;
    for i in 0..count {
        if i % 2 == 0 {
            let p = next_ntt_prime(above, two_r);
            above = p + 1;
            out.push(p);
        } else {
            let p = prev_ntt_prime(below, two_r);
            below = p - 1;
            out.push(p);
        }
    }
    out
}
