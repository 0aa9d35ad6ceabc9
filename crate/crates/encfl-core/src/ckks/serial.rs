//! Byte formats for ciphertexts and keys.
//!
//! Every blob starts with a four-byte magic, a format version, and the
//! SHA-256 hash of the parameter set it was produced under; readers
//! refuse blobs whose hash does not match their own parameters. All
//! integers are little-endian. Serialization is bit-exact: the same
//! object always produces the same bytes.

use super::cipher::Ciphertext;
use super::keys::{extended_primes, extended_tables, KeySet, PublicKey, SecretKey, SwitchKey};
use super::params::{CkksError, CkksParams};
use super::poly::{AutomorphMap, RnsPoly};

pub const MAGIC_CIPHERTEXT: &[u8; 4] = b"CKKS";
pub const MAGIC_SECRET_KEY: &[u8; 4] = b"CKSK";
pub const MAGIC_PUBLIC_KEY: &[u8; 4] = b"CKPK";
pub const MAGIC_KEY_SET: &[u8; 4] = b"CKEV";
pub const FORMAT_VERSION: u16 = 1;

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_poly(out: &mut Vec<u8>, poly: &RnsPoly) {
    for row in &poly.rows {
        for &v in row {
            put_u64(out, v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CkksError> {
        if self.pos + n > self.buf.len() {
            return Err(CkksError::Format("truncated buffer".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkksError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CkksError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CkksError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CkksError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn poly(&mut self, nrows: usize, n: usize, primes: &[u64]) -> Result<RnsPoly, CkksError> {
        let mut rows = Vec::with_capacity(nrows);
        for i in 0..nrows {
            let mut row = Vec::with_capacity(n);
            for _ in 0..n {
                let v = self.u64()?;
                if v >= primes[i] {
                    return Err(CkksError::Format("residue out of range".into()));
                }
                row.push(v);
            }
            rows.push(row);
        }
        Ok(RnsPoly { rows })
    }

    fn finish(&self) -> Result<(), CkksError> {
        if self.pos != self.buf.len() {
            return Err(CkksError::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

fn check_header(
    r: &mut Reader,
    magic: &[u8; 4],
    params: &CkksParams,
) -> Result<(), CkksError> {
    if r.take(4)? != magic {
        return Err(CkksError::Format("bad magic".into()));
    }
    if r.u16()? != FORMAT_VERSION {
        return Err(CkksError::Format("unsupported format version".into()));
    }
    if r.take(32)? != params.hash() {
        return Err(CkksError::ParamsMismatch);
    }
    Ok(())
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], params: &CkksParams) {
    out.extend_from_slice(magic);
    put_u16(out, FORMAT_VERSION);
    out.extend_from_slice(params.hash());
}

pub fn serialize_ciphertext(ct: &Ciphertext, params: &CkksParams) -> Vec<u8> {
    let n = params.ring_dim;
    let rows = ct.level + 1;
    let mut out = Vec::with_capacity(4 + 2 + 32 + 4 + 4 + 24 + 2 * rows * n * 8);
    put_header(&mut out, MAGIC_CIPHERTEXT, params);
    put_u32(&mut out, ct.level as u32);
    put_u32(&mut out, n as u32);
    put_f64(&mut out, ct.scale);
    put_f64(&mut out, ct.noise_bits);
    put_f64(&mut out, ct.value_log2);
    put_poly(&mut out, &ct.c0);
    put_poly(&mut out, &ct.c1);
    out
}

pub fn deserialize_ciphertext(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_CIPHERTEXT, params)?;
    let level = r.u32()? as usize;
    if level > params.max_level {
        return Err(CkksError::Format("level exceeds modulus chain".into()));
    }
    if r.u32()? as usize != params.ring_dim {
        return Err(CkksError::Format("ring dimension mismatch".into()));
    }
    let scale = r.f64()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CkksError::Format("scale not finite and positive".into()));
    }
    let noise_bits = r.f64()?;
    let value_log2 = r.f64()?;
    if noise_bits.is_nan() || value_log2.is_nan() {
        return Err(CkksError::Format("estimator fields are NaN".into()));
    }
    let primes = params.primes(level);
    let c0 = r.poly(level + 1, params.ring_dim, primes)?;
    let c1 = r.poly(level + 1, params.ring_dim, primes)?;
    r.finish()?;
    Ok(Ciphertext {
        c0,
        c1,
        level,
        scale,
        noise_bits,
        value_log2,
        params_hash: *params.hash(),
    })
}

pub fn serialize_secret_key(sk: &SecretKey, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, MAGIC_SECRET_KEY, params);
    put_poly(&mut out, &sk.coeff);
    out
}

pub fn deserialize_secret_key(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<SecretKey, CkksError> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_SECRET_KEY, params)?;
    let primes = extended_primes(params);
    let coeff = r.poly(primes.len(), params.ring_dim, &primes)?;
    r.finish()?;
    let mut ntt = coeff.clone();
    ntt.ntt_forward(&extended_tables(params));
    Ok(SecretKey { coeff, ntt, params_hash: *params.hash() })
}

fn put_switch_key(out: &mut Vec<u8>, key: &SwitchKey) {
    put_u32(out, key.digits.len() as u32);
    for (b, a) in &key.digits {
        put_poly(out, b);
        put_poly(out, a);
    }
}

fn read_switch_key(r: &mut Reader, params: &CkksParams) -> Result<SwitchKey, CkksError> {
    let count = r.u32()? as usize;
    if count != params.max_level + 1 {
        return Err(CkksError::Format("switch key digit count mismatch".into()));
    }
    let primes = extended_primes(params);
    let n = params.ring_dim;
    let digits = (0..count)
        .map(|_| {
            let b = r.poly(primes.len(), n, &primes)?;
            let a = r.poly(primes.len(), n, &primes)?;
            Ok((b, a))
        })
        .collect::<Result<_, CkksError>>()?;
    Ok(SwitchKey { digits })
}

pub fn serialize_public_key(pk: &PublicKey, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, MAGIC_PUBLIC_KEY, params);
    put_poly(&mut out, &pk.b);
    put_poly(&mut out, &pk.a);
    out
}

pub fn deserialize_public_key(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<PublicKey, CkksError> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_PUBLIC_KEY, params)?;
    let primes = params.primes(params.max_level);
    let n = params.ring_dim;
    let b = r.poly(primes.len(), n, primes)?;
    let a = r.poly(primes.len(), n, primes)?;
    r.finish()?;
    let tables = params.ntt_tables(params.max_level);
    let mut b_ntt = b.clone();
    b_ntt.ntt_forward(&tables);
    let mut a_ntt = a.clone();
    a_ntt.ntt_forward(&tables);
    Ok(PublicKey { b, a, b_ntt, a_ntt })
}

/// Public key plus every evaluation key: what a ciphertext-only party
/// needs to compute. Contains no secret material.
pub fn serialize_key_set(keys: &KeySet, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, MAGIC_KEY_SET, params);
    put_poly(&mut out, &keys.pk.b);
    put_poly(&mut out, &keys.pk.a);
    put_switch_key(&mut out, &keys.relin);
    put_u32(&mut out, keys.galois.len() as u32);
    for (&step, key) in &keys.galois {
        put_u32(&mut out, step as u32);
        put_switch_key(&mut out, key);
    }
    out
}

pub fn deserialize_key_set(bytes: &[u8], params: &CkksParams) -> Result<KeySet, CkksError> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_KEY_SET, params)?;
    let chain_primes = params.primes(params.max_level);
    let n = params.ring_dim;
    let b = r.poly(chain_primes.len(), n, chain_primes)?;
    let a = r.poly(chain_primes.len(), n, chain_primes)?;
    let relin = read_switch_key(&mut r, params)?;
    let count = r.u32()? as usize;
    let mut galois = std::collections::BTreeMap::new();
    let mut maps = std::collections::BTreeMap::new();
    for _ in 0..count {
        let step = r.u32()? as usize;
        if step == 0 || step >= params.slots() {
            return Err(CkksError::Format("rotation step out of range".into()));
        }
        let key = read_switch_key(&mut r, params)?;
        maps.insert(
            step,
            AutomorphMap::new(super::keys::galois_exponent(step, n), n),
        );
        galois.insert(step, key);
    }
    r.finish()?;
    let tables = params.ntt_tables(params.max_level);
    let mut b_ntt = b.clone();
    b_ntt.ntt_forward(&tables);
    let mut a_ntt = a.clone();
    a_ntt.ntt_forward(&tables);
    Ok(KeySet {
        pk: PublicKey { b, a, b_ntt, a_ntt },
        relin,
        galois,
        maps,
        params_hash: *params.hash(),
    })
}

/// True if the bytes parse as one of this module's plaintext-bearing
/// formats under the given parameters. Ciphertext blobs pass; anything
/// readable as unencrypted structured data should not be sent where
/// this check is applied.
pub fn is_ciphertext_blob(bytes: &[u8], params: &CkksParams) -> bool {
    deserialize_ciphertext(bytes, params).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::cipher::{decrypt_values, encrypt_values, rotate};
    use crate::ckks::keys::{pk_gen, sk_gen};
    use crate::ckks::params::Profile;

    #[test]
    fn ciphertext_roundtrip_is_bit_exact() {
        let params = CkksParams::profile(Profile::Toy);
        let sk = sk_gen(&params, 1);
        let keys = pk_gen(&sk, &params, 2, &[]);
        let vals = vec![1.25, -3.5, 0.0, 7.75];
        let ct = encrypt_values(&vals, &keys, &params, 3).unwrap();
        let bytes = serialize_ciphertext(&ct, &params);
        let back = deserialize_ciphertext(&bytes, &params).unwrap();
        assert_eq!(serialize_ciphertext(&back, &params), bytes);
        let out = decrypt_values(&back, &sk, &params).unwrap();
        for (o, v) in out.iter().zip(&vals) {
            assert!((o - v).abs() < 1e-6);
        }
    }

    #[test]
    fn corrupt_blobs_are_refused() {
        let params = CkksParams::profile(Profile::Toy);
        let sk = sk_gen(&params, 1);
        let keys = pk_gen(&sk, &params, 2, &[]);
        let ct = encrypt_values(&[1.0], &keys, &params, 3).unwrap();
        let bytes = serialize_ciphertext(&ct, &params);

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            deserialize_ciphertext(truncated, &params),
            Err(CkksError::Format(_))
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(
            deserialize_ciphertext(&bad_magic, &params),
            Err(CkksError::Format(_))
        ));

        let mut bad_hash = bytes.clone();
        bad_hash[10] ^= 0xff;
        assert!(matches!(
            deserialize_ciphertext(&bad_hash, &params),
            Err(CkksError::ParamsMismatch)
        ));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            deserialize_ciphertext(&extra, &params),
            Err(CkksError::Format(_))
        ));
    }

    #[test]
    fn secret_key_roundtrip() {
        let params = CkksParams::profile(Profile::Toy);
        let sk = sk_gen(&params, 5);
        let bytes = serialize_secret_key(&sk, &params);
        let back = deserialize_secret_key(&bytes, &params).unwrap();
        assert_eq!(back.coeff, sk.coeff);
        assert_eq!(back.ntt, sk.ntt);
    }

    #[test]
    fn key_set_roundtrip_preserves_function() {
        let params = CkksParams::profile(Profile::Toy);
        let sk = sk_gen(&params, 5);
        let keys = pk_gen(&sk, &params, 6, &[]);
        let bytes = serialize_key_set(&keys, &params);
        let back = deserialize_key_set(&bytes, &params).unwrap();
        assert_eq!(serialize_key_set(&back, &params), bytes);

        let vals: Vec<f64> = (0..params.slots()).map(|i| i as f64).collect();
        let ct = encrypt_values(&vals, &back, &params, 9).unwrap();
        let rot = rotate(&ct, 2, &back, &params).unwrap();
        let out = decrypt_values(&rot, &sk, &params).unwrap();
        for j in 0..params.slots() {
            let want = vals[(j + 2) % params.slots()];
            assert!((out[j] - want).abs() < 1e-4);
        }
    }

    #[test]
    fn plaintext_json_is_not_a_ciphertext_blob() {
        let params = CkksParams::profile(Profile::Toy);
        assert!(!is_ciphertext_blob(b"{\"weights\": [0.1, 0.2]}", &params));
        assert!(!is_ciphertext_blob(b"", &params));
    }
}
