//! Ciphertexts and the homomorphic operations on them.
//!
//! A ciphertext (c0, c1) at level ℓ satisfies c0 + c1·s ≈ m over
//! Q_ℓ = q_0·…·q_ℓ, with m the encoding of the slot values times the
//! tracked scale. Multiplications rescale by the level's top prime, so
//! each consumes exactly one level; additions are free. Levels align
//! automatically by dropping the higher operand, which changes the
//! representation but not the value.
//!
//! `noise_bits` carries a running log2 bound on the slot-value error.
//! It is an estimate for policy (refusing hopeless decrypts, deciding
//! when to refresh), not part of correctness; the unit tests measure
//! real error against plaintext references.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::arith::{center, mul_shoup, reduce_signed, sub_mod};
use super::encoding::{decode, encode, Plaintext};
use super::keys::{KeySet, SecretKey, SwitchKey};
use super::params::{CkksError, CkksParams};
use super::poly::{sample_gaussian, sample_zo, RnsPoly};

#[derive(Clone, Debug)]
pub struct Ciphertext {
    pub c0: RnsPoly,
    pub c1: RnsPoly,
    pub level: usize,
    pub scale: f64,
    /// log2 of the estimated slot-value error.
    pub noise_bits: f64,
    /// log2 bound on slot magnitudes, propagated from the encoded
    /// inputs. Multiplication scales each operand's error by the other
    /// operand's magnitude, so the estimator needs this alongside the
    /// error itself. Additions bound it by the sum of magnitudes,
    /// which overshoots when summands cannot peak together; the bound
    /// stays valid, just loose.
    pub value_log2: f64,
    pub(crate) params_hash: [u8; 32],
}

impl Ciphertext {
    /// Bits of headroom before the error estimate reaches the values
    /// themselves. Non-positive means decryption would return noise.
    pub fn budget_bits(&self) -> f64 {
        -self.noise_bits
    }

    pub fn check_params(&self, params: &CkksParams) -> Result<(), CkksError> {
        if &self.params_hash == params.hash() {
            Ok(())
        } else {
            Err(CkksError::ParamsMismatch)
        }
    }
}

fn log2_sum(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    // Infinities pass through; the general formula would produce NaN
    // from the inf - inf difference.
    if !hi.is_finite() || lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (1.0 + (lo - hi).exp2()).log2()
}

fn fresh_noise_bits(params: &CkksParams, scale: f64) -> f64 {
    let n = params.ring_dim as f64;
    super::poly::ERR_SIGMA.log2() + 0.5 * (2.0 * n).log2() + 2.0 - scale.log2()
}

/// Error introduced by one rescale rounding, relative to `out_scale`.
fn rescale_noise_bits(params: &CkksParams, out_scale: f64) -> f64 {
    (params.ring_dim as f64).log2() + 1.0 - out_scale.log2()
}

/// Error added by one key switch, relative to `scale`.
fn switch_noise_bits(params: &CkksParams, level: usize, scale: f64) -> f64 {
    let n = (params.ring_dim as f64).log2();
    (params.q(0) as f64).log2() - (params.ks_prime as f64).log2()
        + ((level + 1) as f64).log2()
        + n
        + 2.0
        - scale.log2()
}

pub fn encrypt(
    pt: &Plaintext,
    keys: &KeySet,
    params: &CkksParams,
    seed: u64,
) -> Result<Ciphertext, CkksError> {
    if &keys.params_hash != params.hash() {
        return Err(CkksError::ParamsMismatch);
    }
    let level = pt.level;
    let primes = params.primes(level);
    let tables = params.ntt_tables(level);
    let rows = level + 1;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n = params.ring_dim;
    let mut v = RnsPoly::from_signed(&sample_zo(&mut rng, n), primes);
    v.ntt_forward(&tables);
    let e0 = RnsPoly::from_signed(&sample_gaussian(&mut rng, n), primes);
    let e1 = RnsPoly::from_signed(&sample_gaussian(&mut rng, n), primes);

    let mut c0 = keys.pk.b_ntt.truncated(rows).mul_pointwise(&v, primes);
    c0.ntt_inverse(&tables);
    c0.add_assign(&e0, primes);
    c0.add_assign(&pt.poly, primes);
    let mut c1 = keys.pk.a_ntt.truncated(rows).mul_pointwise(&v, primes);
    c1.ntt_inverse(&tables);
    c1.add_assign(&e1, primes);

    Ok(Ciphertext {
        c0,
        c1,
        level,
        scale: pt.scale,
        noise_bits: fresh_noise_bits(params, pt.scale),
        value_log2: pt.value_log2,
        params_hash: *params.hash(),
    })
}

/// Encode-and-encrypt at the top level and default scale.
pub fn encrypt_values(
    values: &[f64],
    keys: &KeySet,
    params: &CkksParams,
    seed: u64,
) -> Result<Ciphertext, CkksError> {
    let pt = encode(values, params.scale, params.max_level, params)?;
    encrypt(&pt, keys, params, seed)
}

pub fn decrypt(
    ct: &Ciphertext,
    sk: &SecretKey,
    params: &CkksParams,
) -> Result<Plaintext, CkksError> {
    ct.check_params(params)?;
    if &sk.params_hash != params.hash() {
        return Err(CkksError::ParamsMismatch);
    }
    if ct.noise_bits >= 0.0 {
        return Err(CkksError::NoiseBudget { bits: ct.budget_bits() });
    }
    // Two RNS rows suffice to reconstruct message coefficients, and
    // dropping the rest keeps reconstruction inside i128.
    let work = drop_to_level(ct, ct.level.min(1), params)?;
    let primes = params.primes(work.level);
    let tables = params.ntt_tables(work.level);
    let mut m = work.c1.clone();
    m.ntt_forward(&tables);
    m.mul_pointwise_assign(&sk.ntt.truncated(work.level + 1), primes);
    m.ntt_inverse(&tables);
    m.add_assign(&work.c0, primes);
    // The decrypted plaintext exists to be decoded; its magnitude is
    // unknown here, and the infinite bound poisons any attempt to feed
    // it back into homomorphic arithmetic.
    Ok(Plaintext { poly: m, level: work.level, scale: work.scale, value_log2: f64::INFINITY })
}

pub fn decrypt_values(
    ct: &Ciphertext,
    sk: &SecretKey,
    params: &CkksParams,
) -> Result<Vec<f64>, CkksError> {
    Ok(decode(&decrypt(ct, sk, params)?, params))
}

/// Re-express at a lower level by dropping top RNS rows. The value and
/// scale are unchanged; only multiplication depth is given up.
pub fn drop_to_level(
    ct: &Ciphertext,
    level: usize,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    ct.check_params(params)?;
    if level > ct.level {
        return Err(CkksError::LevelExhausted { needed: level, level: ct.level });
    }
    Ok(Ciphertext {
        c0: ct.c0.truncated(level + 1),
        c1: ct.c1.truncated(level + 1),
        level,
        scale: ct.scale,
        noise_bits: ct.noise_bits,
        value_log2: ct.value_log2,
        params_hash: ct.params_hash,
    })
}

fn check_scales(a: f64, b: f64) -> Result<(), CkksError> {
    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()) {
        return Err(CkksError::ScaleMismatch { left: a, right: b });
    }
    Ok(())
}

fn aligned<'a>(
    a: &'a Ciphertext,
    b: &'a Ciphertext,
    params: &CkksParams,
) -> Result<(Ciphertext, Ciphertext), CkksError> {
    a.check_params(params)?;
    b.check_params(params)?;
    let level = a.level.min(b.level);
    Ok((drop_to_level(a, level, params)?, drop_to_level(b, level, params)?))
}

pub fn he_add(
    a: &Ciphertext,
    b: &Ciphertext,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    check_scales(a.scale, b.scale)?;
    let (mut x, y) = aligned(a, b, params)?;
    let primes = params.primes(x.level);
    x.c0.add_assign(&y.c0, primes);
    x.c1.add_assign(&y.c1, primes);
    x.noise_bits = log2_sum(a.noise_bits, b.noise_bits);
    x.value_log2 = log2_sum(a.value_log2, b.value_log2);
    Ok(x)
}

pub fn he_sub(
    a: &Ciphertext,
    b: &Ciphertext,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    check_scales(a.scale, b.scale)?;
    let (mut x, y) = aligned(a, b, params)?;
    let primes = params.primes(x.level);
    x.c0.sub_assign(&y.c0, primes);
    x.c1.sub_assign(&y.c1, primes);
    x.noise_bits = log2_sum(a.noise_bits, b.noise_bits);
    x.value_log2 = log2_sum(a.value_log2, b.value_log2);
    Ok(x)
}

pub fn add_plain(
    ct: &Ciphertext,
    pt: &Plaintext,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    ct.check_params(params)?;
    check_scales(ct.scale, pt.scale)?;
    if pt.level < ct.level {
        return Err(CkksError::LevelExhausted { needed: ct.level, level: pt.level });
    }
    let mut out = ct.clone();
    let primes = params.primes(ct.level);
    out.c0.add_assign(&pt.poly.truncated(ct.level + 1), primes);
    out.noise_bits = log2_sum(ct.noise_bits, -pt.scale.log2());
    out.value_log2 = log2_sum(ct.value_log2, pt.value_log2);
    Ok(out)
}

/// Divide out the top prime: the mandatory tail of every multiply.
fn rescale_poly(p: &mut RnsPoly, level: usize, params: &CkksParams) {
    let q_top = params.q(level);
    let last = p.rows[level].clone();
    for i in 0..level {
        let qi = params.q(i);
        let (inv, inv_shoup) = params.rescale_inv(level, i);
        for (dst, &top) in p.rows[i].iter_mut().zip(&last) {
            let lift = reduce_signed(center(top, q_top), qi);
            *dst = mul_shoup(sub_mod(*dst, lift, qi), inv, inv_shoup, qi);
        }
    }
    p.rows.truncate(level);
}

pub fn mul_plain(
    ct: &Ciphertext,
    pt: &Plaintext,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    ct.check_params(params)?;
    if ct.level < 1 {
        return Err(CkksError::LevelExhausted { needed: 1, level: ct.level });
    }
    if pt.level < ct.level {
        return Err(CkksError::LevelExhausted { needed: ct.level, level: pt.level });
    }
    let level = ct.level;
    let primes = params.primes(level);
    let tables = params.ntt_tables(level);
    let mut pt_ntt = pt.poly.truncated(level + 1);
    pt_ntt.ntt_forward(&tables);

    let mut c0 = ct.c0.clone();
    c0.ntt_forward(&tables);
    c0.mul_pointwise_assign(&pt_ntt, primes);
    c0.ntt_inverse(&tables);
    let mut c1 = ct.c1.clone();
    c1.ntt_forward(&tables);
    c1.mul_pointwise_assign(&pt_ntt, primes);
    c1.ntt_inverse(&tables);

    rescale_poly(&mut c0, level, params);
    rescale_poly(&mut c1, level, params);
    let out_scale = ct.scale * pt.scale / params.q(level) as f64;
    Ok(Ciphertext {
        c0,
        c1,
        level: level - 1,
        scale: out_scale,
        noise_bits: log2_sum(
            ct.noise_bits + pt.value_log2,
            rescale_noise_bits(params, out_scale),
        ),
        value_log2: ct.value_log2 + pt.value_log2,
        params_hash: ct.params_hash,
    })
}

pub fn he_mul(
    a: &Ciphertext,
    b: &Ciphertext,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    if &keys.params_hash != params.hash() {
        return Err(CkksError::ParamsMismatch);
    }
    let (x, y) = aligned(a, b, params)?;
    if x.level < 1 {
        return Err(CkksError::LevelExhausted { needed: 1, level: x.level });
    }
    let level = x.level;
    let primes = params.primes(level);
    let tables = params.ntt_tables(level);

    let mut x0 = x.c0;
    let mut x1 = x.c1;
    let mut y0 = y.c0;
    let mut y1 = y.c1;
    x0.ntt_forward(&tables);
    x1.ntt_forward(&tables);
    y0.ntt_forward(&tables);
    y1.ntt_forward(&tables);

    let mut d0 = x0.mul_pointwise(&y0, primes);
    let mut d1 = x0.mul_pointwise(&y1, primes);
    d1.add_assign(&x1.mul_pointwise(&y0, primes), primes);
    let mut d2 = x1.mul_pointwise(&y1, primes);
    d0.ntt_inverse(&tables);
    d1.ntt_inverse(&tables);
    d2.ntt_inverse(&tables);

    let (u0, u1) = key_switch(&d2, level, &keys.relin, params);
    d0.add_assign(&u0, primes);
    d1.add_assign(&u1, primes);

    rescale_poly(&mut d0, level, params);
    rescale_poly(&mut d1, level, params);
    let out_scale = a.scale * b.scale / params.q(level) as f64;
    // Each operand's error rides on the other operand's magnitude.
    let noise = log2_sum(
        log2_sum(a.noise_bits + b.value_log2, b.noise_bits + a.value_log2),
        log2_sum(
            switch_noise_bits(params, level, out_scale),
            rescale_noise_bits(params, out_scale),
        ),
    );
    Ok(Ciphertext {
        c0: d0,
        c1: d1,
        level: level - 1,
        scale: out_scale,
        noise_bits: noise,
        value_log2: a.value_log2 + b.value_log2,
        params_hash: *params.hash(),
    })
}

/// Left-rotate slots by `step`, using the dedicated key when present
/// and the power-of-two decomposition of `step` otherwise.
pub fn rotate(
    ct: &Ciphertext,
    step: usize,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    ct.check_params(params)?;
    if &keys.params_hash != params.hash() {
        return Err(CkksError::ParamsMismatch);
    }
    let slots = params.slots();
    let step = step % slots;
    if step == 0 {
        return Ok(ct.clone());
    }
    if keys.galois.contains_key(&step) {
        return apply_galois(ct, step, keys, params);
    }
    let mut missing = Vec::new();
    let mut bit = 1usize;
    let mut rem = step;
    let mut parts = Vec::new();
    while rem != 0 {
        if rem & 1 == 1 {
            if keys.galois.contains_key(&bit) {
                parts.push(bit);
            } else {
                missing.push(bit);
            }
        }
        rem >>= 1;
        bit <<= 1;
    }
    if !missing.is_empty() {
        return Err(CkksError::MissingRotationKey { step });
    }
    let mut out = ct.clone();
    for p in parts {
        out = apply_galois(&out, p, keys, params)?;
    }
    Ok(out)
}

fn apply_galois(
    ct: &Ciphertext,
    step: usize,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    let map = &keys.maps[&step];
    let ksk = &keys.galois[&step];
    let primes = params.primes(ct.level);
    let mut c0 = map.apply(&ct.c0, primes);
    let c1 = map.apply(&ct.c1, primes);
    let (u0, u1) = key_switch(&c1, ct.level, ksk, params);
    c0.add_assign(&u0, primes);
    Ok(Ciphertext {
        c0,
        c1: u1,
        level: ct.level,
        scale: ct.scale,
        noise_bits: log2_sum(
            ct.noise_bits,
            switch_noise_bits(params, ct.level, ct.scale),
        ),
        value_log2: ct.value_log2,
        params_hash: ct.params_hash,
    })
}

/// Switch `d`·s' into the current key: returns (u0, u1) with
/// u0 + u1·s ≈ d·s'. `d` arrives in coefficient form at `level`.
///
/// Each RNS digit of d is lifted to the active primes plus P, folded
/// against the matching key entry in evaluation form (products
/// accumulate lazily in u128), and the result is taken back down by P.
pub(crate) fn key_switch(
    d: &RnsPoly,
    level: usize,
    ksk: &SwitchKey,
    params: &CkksParams,
) -> (RnsPoly, RnsPoly) {
    let n = params.ring_dim;
    let nrows = level + 1;
    let p_prime = params.ks_prime;
    let p_row_idx = params.max_level + 1;

    let mut acc0 = vec![vec![0u128; n]; nrows + 1];
    let mut acc1 = vec![vec![0u128; n]; nrows + 1];
    let mut lifted = RnsPoly::zero(nrows + 1, n);
    for j in 0..nrows {
        let qj = params.q(j);
        for i in 0..=nrows {
            let q = if i < nrows { params.q(i) } else { p_prime };
            let src = &d.rows[j];
            let dst = &mut lifted.rows[i];
            if i == j {
                dst.copy_from_slice(src);
            } else {
                for (out, &r) in dst.iter_mut().zip(src) {
                    *out = reduce_signed(center(r, qj), q);
                }
            }
        }
        let mut tables = params.ntt_tables(level);
        tables.push(params.ntt_ks());
        lifted.ntt_forward(&tables);

        let (b_j, a_j) = &ksk.digits[j];
        for i in 0..=nrows {
            let ksk_idx = if i < nrows { i } else { p_row_idx };
            let b_row = &b_j.rows[ksk_idx];
            let a_row = &a_j.rows[ksk_idx];
            let lift_row = &lifted.rows[i];
            let (a0, a1) = (&mut acc0[i], &mut acc1[i]);
            for k in 0..n {
                let l = lift_row[k] as u128;
                a0[k] += l * b_row[k] as u128;
                a1[k] += l * a_row[k] as u128;
            }
        }
    }

    let reduce_rows = |acc: Vec<Vec<u128>>| -> RnsPoly {
        let rows = acc
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let q = if i < nrows { params.q(i) } else { p_prime } as u128;
                row.into_iter().map(|v| (v % q) as u64).collect()
            })
            .collect();
        RnsPoly { rows }
    };
    let mut u0 = reduce_rows(acc0);
    let mut u1 = reduce_rows(acc1);
    let mut tables = params.ntt_tables(level);
    tables.push(params.ntt_ks());
    u0.ntt_inverse(&tables);
    u1.ntt_inverse(&tables);

    let mod_down = |u: &mut RnsPoly| {
        let p_row = u.rows.pop().expect("extended row present");
        for i in 0..nrows {
            let qi = params.q(i);
            let (inv, inv_shoup) = params.ks_inv(i);
            for (dst, &pv) in u.rows[i].iter_mut().zip(&p_row) {
                let lift = reduce_signed(center(pv, p_prime), qi);
                *dst = mul_shoup(sub_mod(*dst, lift, qi), inv, inv_shoup, qi);
            }
        }
    };
    mod_down(&mut u0);
    mod_down(&mut u1);
    (u0, u1)
}
