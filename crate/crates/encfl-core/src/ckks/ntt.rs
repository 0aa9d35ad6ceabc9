//! Negacyclic number-theoretic transform, one table per (prime, R).
//!
//! The twist by powers of the primitive 2R-th root psi is merged into
//! the butterfly tables, so `forward` maps coefficients of
//! Z_q\[X\]/(X^R + 1) straight to evaluation form and pointwise
//! multiplication realizes negacyclic convolution. Twiddles carry
//! Shoup precomputations; butterflies never touch `%`.

use super::arith::{add_mod, inv_mod, mul_shoup, primitive_2nth_root, shoup_precompute, sub_mod};

#[derive(Clone, Debug)]
pub struct NttTable {
    pub q: u64,
    pub n: usize,
    /// psi^brv(i), i in [0, n), brv over log2(n) bits.
    fwd: Vec<u64>,
    fwd_shoup: Vec<u64>,
    /// psi^-brv(i).
    inv: Vec<u64>,
    inv_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(i: usize, bits: u32) -> usize {
    i.reverse_bits() >> (usize::BITS - bits)
}

impl NttTable {
    pub fn new(q: u64, n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2);
        assert!(q < 1 << 62, "modulus too large for Shoup arithmetic");
        let bits = n.trailing_zeros();
        let psi = primitive_2nth_root(q, n as u64);
        let psi_inv = inv_mod(psi, q);

        let mut pow = vec![0u64; n];
        let mut ipow = vec![0u64; n];
        pow[0] = 1;
        ipow[0] = 1;
        for i in 1..n {
            pow[i] = super::arith::mul_mod(pow[i - 1], psi, q);
            ipow[i] = super::arith::mul_mod(ipow[i - 1], psi_inv, q);
        }
        let mut fwd = vec![0u64; n];
        let mut inv = vec![0u64; n];
        for i in 0..n {
            fwd[i] = pow[bit_reverse(i, bits)];
            inv[i] = ipow[bit_reverse(i, bits)];
        }
        let fwd_shoup = fwd.iter().map(|&w| shoup_precompute(w, q)).collect();
        let inv_shoup = inv.iter().map(|&w| shoup_precompute(w, q)).collect();
        let n_inv = inv_mod(n as u64, q);
        NttTable {
            q,
            n,
            fwd,
            fwd_shoup,
            inv,
            inv_shoup,
            n_inv,
            n_inv_shoup: shoup_precompute(n_inv, q),
        }
    }

    /// In-place coefficient -> evaluation transform.
    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let w = self.fwd[m + i];
                let ws = self.fwd_shoup[m + i];
                let j1 = 2 * i * t;
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_shoup(a[j + t], w, ws, q);
                    a[j] = add_mod(u, v, q);
                    a[j + t] = sub_mod(u, v, q);
                }
            }
            m <<= 1;
        }
    }

    /// In-place evaluation -> coefficient transform.
    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let w = self.inv[h + i];
                let ws = self.inv_shoup[h + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    a[j] = add_mod(u, v, q);
                    a[j + t] = mul_shoup(sub_mod(u, v, q), w, ws, q);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_shoup(*x, self.n_inv, self.n_inv_shoup, q);
        }
    }
}
