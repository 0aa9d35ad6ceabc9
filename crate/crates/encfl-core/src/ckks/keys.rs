//! Key material: ternary secret, RLWE public key, and switching keys.
//!
//! Switching keys follow the hybrid construction with one special
//! prime P. The key for target secret s' has one entry per chain
//! prime: ksk_j = (-a_j·s + e_j + P·T_j·s', a_j) over the extended
//! basis q_0..q_L, P, where the gadget integer T_j is 1 mod q_j and 0
//! mod every other chain prime. Only row j of entry j carries the
//! message term (P mod q_j)·s', and no row carries it mod P, so the
//! entries are built prime-wise without any multiprecision work. The
//! same machinery serves relinearization (s' = s²) and slot rotations
//! (s' = s(X^g)).

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::arith::mul_mod;
use super::ntt::NttTable;
use super::params::CkksParams;
use super::poly::{
    sample_gaussian, sample_ternary, sample_uniform, AutomorphMap, RnsPoly,
};

pub struct SecretKey {
    /// Secret over the extended basis (chain primes then P), coefficient domain.
    pub(crate) coeff: RnsPoly,
    /// The same secret in evaluation form, one row per basis prime.
    pub(crate) ntt: RnsPoly,
    pub(crate) params_hash: [u8; 32],
}

#[derive(Clone)]
pub struct PublicKey {
    /// (b, a) with b = -a·s + e over the chain primes, coefficient domain.
    pub b: RnsPoly,
    pub a: RnsPoly,
    pub(crate) b_ntt: RnsPoly,
    pub(crate) a_ntt: RnsPoly,
}

/// One switching key: an entry per chain prime, stored in evaluation
/// form over the extended basis.
#[derive(Clone)]
pub struct SwitchKey {
    /// digits[j] = (b_j, a_j), rows = chain primes then P.
    pub digits: Vec<(RnsPoly, RnsPoly)>,
}

pub struct KeySet {
    pub pk: PublicKey,
    pub relin: SwitchKey,
    /// Rotation keys by left-rotation step in 1..slots.
    pub galois: BTreeMap<usize, SwitchKey>,
    pub(crate) maps: BTreeMap<usize, AutomorphMap>,
    pub(crate) params_hash: [u8; 32],
}

/// Basis primes for switching keys: the whole chain plus P.
pub(crate) fn extended_primes(params: &CkksParams) -> Vec<u64> {
    let mut v = params.modulus_chain.clone();
    v.push(params.ks_prime);
    v
}

pub(crate) fn extended_tables(params: &CkksParams) -> Vec<&NttTable> {
    let mut v = params.ntt_tables(params.max_level);
    v.push(params.ntt_ks());
    v
}

pub fn sk_gen(params: &CkksParams, seed: u64) -> SecretKey {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = sample_ternary(&mut rng, params.ring_dim);
    let primes = extended_primes(params);
    let coeff = RnsPoly::from_signed(&s, &primes);
    let mut ntt = coeff.clone();
    ntt.ntt_forward(&extended_tables(params));
    SecretKey { coeff, ntt, params_hash: *params.hash() }
}

/// Galois exponent realizing a left rotation by `step` slots.
pub(crate) fn galois_exponent(step: usize, ring_dim: usize) -> usize {
    let m = 2 * ring_dim;
    let mut g = 1usize;
    for _ in 0..step {
        g = g * 5 % m;
    }
    g
}

/// Steps every key set carries: powers of two for arbitrary-rotation
/// decomposition, plus their complements so right rotations (used when
/// replicating a value across slots) stay single-switch.
pub fn default_rotation_steps(slots: usize) -> BTreeSet<usize> {
    let mut steps = BTreeSet::new();
    let mut p = 1usize;
    while p < slots {
        steps.insert(p);
        steps.insert(slots - p);
        p <<= 1;
    }
    steps
}

/// Public key plus evaluation keys. `extra_steps` adds rotation keys
/// beyond the defaults (strides of a packing layout, say); steps are
/// taken mod the slot count and step 0 is ignored.
pub fn pk_gen(
    sk: &SecretKey,
    params: &CkksParams,
    seed: u64,
    extra_steps: &[usize],
) -> KeySet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = params.ring_dim;
    let chain_primes = params.primes(params.max_level).to_vec();
    let chain_tables = params.ntt_tables(params.max_level);

    let a = sample_uniform(&mut rng, &chain_primes, n);
    let mut a_ntt = a.clone();
    a_ntt.ntt_forward(&chain_tables);
    let mut e = RnsPoly::from_signed(&sample_gaussian(&mut rng, n), &chain_primes);
    e.ntt_forward(&chain_tables);
    let mut b_ntt = a_ntt.mul_pointwise(&sk.ntt.truncated(chain_primes.len()), &chain_primes);
    b_ntt.negate(&chain_primes);
    b_ntt.add_assign(&e, &chain_primes);
    let mut b = b_ntt.clone();
    b.ntt_inverse(&chain_tables);
    let pk = PublicKey { b, a, b_ntt, a_ntt };

    let ext_primes = extended_primes(params);
    let s_sq_ntt = sk.ntt.mul_pointwise(&sk.ntt, &ext_primes);
    let relin = switch_key_gen(&s_sq_ntt, sk, params, &mut rng);

    let mut steps = default_rotation_steps(params.slots());
    for &s in extra_steps {
        let s = s % params.slots();
        if s != 0 {
            steps.insert(s);
        }
    }
    let ext_tables = extended_tables(params);
    let mut galois = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for &step in &steps {
        let map = AutomorphMap::new(galois_exponent(step, n), n);
        let mut s_rot_ntt = map.apply(&sk.coeff, &ext_primes);
        s_rot_ntt.ntt_forward(&ext_tables);
        galois.insert(step, switch_key_gen(&s_rot_ntt, sk, params, &mut rng));
        maps.insert(step, map);
    }

    KeySet { pk, relin, galois, maps, params_hash: *params.hash() }
}

/// Switching key toward `target_ntt` (the new secret, evaluation form
/// over the extended basis) under the current secret `sk`.
fn switch_key_gen(
    target_ntt: &RnsPoly,
    sk: &SecretKey,
    params: &CkksParams,
    rng: &mut ChaCha20Rng,
) -> SwitchKey {
    let n = params.ring_dim;
    let primes = extended_primes(params);
    let tables = extended_tables(params);
    let digits = (0..=params.max_level)
        .map(|j| {
            let mut a = sample_uniform(rng, &primes, n);
            a.ntt_forward(&tables);
            let mut e = RnsPoly::from_signed(&sample_gaussian(rng, n), &primes);
            e.ntt_forward(&tables);
            let mut b = a.mul_pointwise(&sk.ntt, &primes);
            b.negate(&primes);
            b.add_assign(&e, &primes);
            let (p_mod_qj, _) = params.ks_mod(j);
            let qj = primes[j];
            for (dst, &src) in b.rows[j].iter_mut().zip(&target_ntt.rows[j]) {
                *dst = super::arith::add_mod(*dst, mul_mod(p_mod_qj, src, qj), qj);
            }
            (b, a)
        })
        .collect();
    SwitchKey { digits }
}

impl KeySet {
    pub fn has_rotation(&self, step: usize) -> bool {
        self.galois.contains_key(&step)
    }

    pub fn rotation_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.galois.keys().copied()
    }
}
