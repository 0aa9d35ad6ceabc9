//! RNS polynomials: rows of residues, one row per prime of a basis the
//! caller tracks. The struct itself is deliberately dumb; level and
//! basis bookkeeping live in `Ciphertext` and `CkksParams`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::arith::{add_mod, mul_mod, neg_mod, reduce_signed, sub_mod};
use super::ntt::NttTable;

/// Width of the RLWE error distribution.
pub const ERR_SIGMA: f64 = 3.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnsPoly {
    /// rows[i][k] = coefficient k mod prime i of the caller's basis.
    pub rows: Vec<Vec<u64>>,
}

impl RnsPoly {
    pub fn zero(nrows: usize, n: usize) -> Self {
        RnsPoly { rows: vec![vec![0u64; n]; nrows] }
    }

    pub fn n(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Residue rows for signed integer coefficients.
    pub fn from_signed(coeffs: &[i64], primes: &[u64]) -> Self {
        let rows = primes
            .iter()
            .map(|&q| coeffs.iter().map(|&c| reduce_signed(c, q)).collect())
            .collect();
        RnsPoly { rows }
    }

    pub fn truncated(&self, nrows: usize) -> Self {
        RnsPoly { rows: self.rows[..nrows].to_vec() }
    }

    pub fn add_assign(&mut self, other: &RnsPoly, primes: &[u64]) {
        for (i, &q) in primes.iter().enumerate() {
            for (a, &b) in self.rows[i].iter_mut().zip(&other.rows[i]) {
                *a = add_mod(*a, b, q);
            }
        }
    }

    pub fn sub_assign(&mut self, other: &RnsPoly, primes: &[u64]) {
        for (i, &q) in primes.iter().enumerate() {
            for (a, &b) in self.rows[i].iter_mut().zip(&other.rows[i]) {
                *a = sub_mod(*a, b, q);
            }
        }
    }

    pub fn negate(&mut self, primes: &[u64]) {
        for (i, &q) in primes.iter().enumerate() {
            for a in self.rows[i].iter_mut() {
                *a = neg_mod(*a, q);
            }
        }
    }

    pub fn ntt_forward(&mut self, tables: &[&NttTable]) {
        for (row, t) in self.rows.iter_mut().zip(tables) {
            t.forward(row);
        }
    }

    pub fn ntt_inverse(&mut self, tables: &[&NttTable]) {
        for (row, t) in self.rows.iter_mut().zip(tables) {
            t.inverse(row);
        }
    }

    /// Pointwise product, both operands in evaluation form.
    pub fn mul_pointwise(&self, other: &RnsPoly, primes: &[u64]) -> RnsPoly {
        let rows = primes
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                self.rows[i]
                    .iter()
                    .zip(&other.rows[i])
                    .map(|(&a, &b)| mul_mod(a, b, q))
                    .collect()
            })
            .collect();
        RnsPoly { rows }
    }

    pub fn mul_pointwise_assign(&mut self, other: &RnsPoly, primes: &[u64]) {
        for (i, &q) in primes.iter().enumerate() {
            for (a, &b) in self.rows[i].iter_mut().zip(&other.rows[i]) {
                *a = mul_mod(*a, b, q);
            }
        }
    }
}

/// Index permutation (with negacyclic sign) realizing f(X) -> f(X^g).
#[derive(Clone, Debug)]
pub struct AutomorphMap {
    /// target[k] = position of source coefficient k in the image.
    target: Vec<u32>,
    negate: Vec<bool>,
}

impl AutomorphMap {
    pub fn new(g: usize, n: usize) -> Self {
        debug_assert!(g % 2 == 1);
        let two_n = 2 * n;
        let mut target = vec![0u32; n];
        let mut negate = vec![false; n];
        for k in 0..n {
            let j = (k * g) % two_n;
            if j < n {
                target[k] = j as u32;
            } else {
                target[k] = (j - n) as u32;
                negate[k] = true;
            }
        }
        AutomorphMap { target, negate }
    }

    pub fn apply(&self, poly: &RnsPoly, primes: &[u64]) -> RnsPoly {
        let n = poly.n();
        let mut out = RnsPoly::zero(primes.len(), n);
        for (i, &q) in primes.iter().enumerate() {
            let src = &poly.rows[i];
            let dst = &mut out.rows[i];
            for k in 0..n {
                let v = src[k];
                dst[self.target[k] as usize] = if self.negate[k] { neg_mod(v, q) } else { v };
            }
        }
        out
    }
}

/// Uniform residues row by row (a fresh uniform ring element in CRT form).
pub fn sample_uniform<R: Rng>(rng: &mut R, primes: &[u64], n: usize) -> RnsPoly {
    let rows = primes
        .iter()
        .map(|&q| (0..n).map(|_| rng.gen_range(0..q)).collect())
        .collect();
    RnsPoly { rows }
}

/// Uniform ternary coefficients in {-1, 0, 1}.
pub fn sample_ternary<R: Rng>(rng: &mut R, n: usize) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(-1i64..=1)).collect()
}

/// Zero with probability 1/2, otherwise ±1: the encryption blinder.
pub fn sample_zo<R: Rng>(rng: &mut R, n: usize) -> Vec<i64> {
    (0..n)
        .map(|_| match rng.gen_range(0u8..4) {
            0 => -1i64,
            1 => 1,
            _ => 0,
        })
        .collect()
}

/// Rounded Gaussian error, sigma = `ERR_SIGMA`.
pub fn sample_gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<i64> {
    let normal = Normal::new(0.0, ERR_SIGMA).expect("valid sigma");
    (0..n).map(|_| normal.sample(rng).round() as i64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::arith::next_ntt_prime;

    #[test]
    fn automorphism_composes_like_exponent_product() {
        let n = 16usize;
        let primes = [next_ntt_prime(1 << 30, 2 * n as u64)];
        let coeffs: Vec<i64> = (0..n as i64).map(|k| k - 7).collect();
        let p = RnsPoly::from_signed(&coeffs, &primes);
        let g1 = 5usize;
        let g2 = 25 % (2 * n);
        let a = AutomorphMap::new(g1, n).apply(&p, &primes);
        let ab = AutomorphMap::new(g1, n).apply(&a, &primes);
        let direct = AutomorphMap::new(g2, n).apply(&p, &primes);
        assert_eq!(ab, direct);
    }

    #[test]
    fn automorphism_identity() {
        let n = 8usize;
        let primes = [next_ntt_prime(1 << 20, 2 * n as u64)];
        let coeffs: Vec<i64> = (0..n as i64).collect();
        let p = RnsPoly::from_signed(&coeffs, &primes);
        let same = AutomorphMap::new(1, n).apply(&p, &primes);
        assert_eq!(p, same);
    }
}
