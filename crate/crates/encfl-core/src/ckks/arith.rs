//! Scalar modular arithmetic for word-sized NTT primes.
//!
//! All moduli in this crate are odd primes below 2^62, so `u128`
//! products never overflow and Shoup's precomputed-quotient trick is
//! valid for multiplications by a fixed operand.

/// (a + b) mod q. Inputs must already be reduced.
#[inline(always)]
pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

/// (a - b) mod q. Inputs must already be reduced.
#[inline(always)]
pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

#[inline(always)]
pub fn neg_mod(a: u64, q: u64) -> u64 {
    if a == 0 {
        0
    } else {
        q - a
    }
}

#[inline(always)]
pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1u64;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

/// Inverse of `a` modulo prime `q` via Fermat.
pub fn inv_mod(a: u64, q: u64) -> u64 {
    debug_assert!(a % q != 0);
    pow_mod(a, q - 2, q)
}

/// Shoup precomputation for repeated multiplication by `w` mod `q`:
/// returns floor(w * 2^64 / q).
#[inline]
pub fn shoup_precompute(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// x * w mod q using the precomputed quotient. Requires q < 2^63.
#[inline(always)]
pub fn mul_shoup(x: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let k = ((x as u128 * w_shoup as u128) >> 64) as u64;
    let r = x.wrapping_mul(w).wrapping_sub(k.wrapping_mul(q));
    if r >= q {
        r - q
    } else {
        r
    }
}

/// Deterministic Miller-Rabin, exact for all u64.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0u32;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// First prime p >= `start` with p ≡ 1 (mod m). `start` is rounded up
/// to the congruence class first.
pub fn next_ntt_prime(start: u64, m: u64) -> u64 {
    let mut p = start + ((m + 1 - start % m) % m);
    if p < start {
        p += m;
    }
    loop {
        if is_prime(p) {
            return p;
        }
        p += m;
    }
}

/// Last prime p <= `start` with p ≡ 1 (mod m).
pub fn prev_ntt_prime(start: u64, m: u64) -> u64 {
    let mut p = start - ((start + m - 1) % m);
    loop {
        if is_prime(p) {
            return p;
        }
        p -= m;
    }
}

/// A primitive 2n-th root of unity mod q. Requires q ≡ 1 (mod 2n).
/// psi is primitive iff psi^n ≡ -1.
pub fn primitive_2nth_root(q: u64, n: u64) -> u64 {
    assert_eq!((q - 1) % (2 * n), 0, "modulus not NTT friendly");
    let cofactor = (q - 1) / (2 * n);
    for h in 2u64.. {
        let c = pow_mod(h, cofactor, q);
        if pow_mod(c, n, q) == q - 1 {
            return c;
        }
    }
    unreachable!()
}

/// Centered representative of `r` mod `q`, in (-q/2, q/2].
#[inline]
pub fn center(r: u64, q: u64) -> i64 {
    if r > q / 2 {
        -((q - r) as i64)
    } else {
        r as i64
    }
}

/// Reduce a signed value into [0, q).
#[inline]
pub fn reduce_signed(v: i64, q: u64) -> u64 {
    let m = v % q as i64;
    if m < 0 {
        (m + q as i64) as u64
    } else {
        m as u64
    }
}
