//! Canonical embedding between real slot vectors and ring elements.
//!
//! A ring element m(X) mod (X^R + 1) is identified with its values at
//! the primitive 2R-th roots of unity ζ^j, j odd. Indexing the upper
//! half of those roots by the orbit 5^0, 5^1, ... gives R/2 complex
//! slots in which ring addition and multiplication act slot-wise, and
//! the map X -> X^(5^r) becomes a cyclic slot rotation. Real inputs
//! keep every slot's conjugate pair implicit, so the full R/2 slots
//! carry R/2 real values.
//!
//! Encoding runs the inverse embedding with a tangent-ordered FFT
//! (O(R log R)); `encode_direct`/`decode_direct` evaluate the defining
//! sums in O(R^2) and exist as oracles for the fast path.

use super::params::{CkksError, CkksParams};
use super::poly::RnsPoly;

/// Minimal complex arithmetic; the embedding is the only consumer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

impl C64 {
    pub fn new(re: f64, im: f64) -> C64 {
        C64 { re, im }
    }

    pub fn conj(self) -> C64 {
        C64 { re: self.re, im: -self.im }
    }

    pub fn scale(self, s: f64) -> C64 {
        C64 { re: self.re * s, im: self.im * s }
    }
}

impl std::ops::Add for C64 {
    type Output = C64;
    fn add(self, o: C64) -> C64 {
        C64::new(self.re + o.re, self.im + o.im)
    }
}

impl std::ops::Sub for C64 {
    type Output = C64;
    fn sub(self, o: C64) -> C64 {
        C64::new(self.re - o.re, self.im - o.im)
    }
}

impl std::ops::Mul for C64 {
    type Output = C64;
    fn mul(self, o: C64) -> C64 {
        C64::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// Precomputed roots and slot ordering for one ring dimension.
pub struct EmbedTable {
    pub ring_dim: usize,
    pub slots: usize,
    /// rot_group[j] = 5^j mod 2R: the exponent evaluated in slot j.
    pub rot_group: Vec<usize>,
    /// ksi[k] = exp(2πi·k / 2R), k in 0..=2R.
    pub ksi: Vec<C64>,
}

impl EmbedTable {
    pub fn new(ring_dim: usize) -> EmbedTable {
        let m = 2 * ring_dim;
        let slots = ring_dim / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut five = 1usize;
        for _ in 0..slots {
            rot_group.push(five);
            five = five * 5 % m;
        }
        let ksi = (0..=m)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                C64::new(t.cos(), t.sin())
            })
            .collect();
        EmbedTable { ring_dim, slots, rot_group, ksi }
    }

    /// Slots -> packed coefficient halves, in place. Inverse of `fft`.
    pub fn fft_inv(&self, vals: &mut [C64]) {
        let size = vals.len();
        debug_assert!(size.is_power_of_two() && size <= self.slots);
        let m = 2 * self.ring_dim;
        let mut len = size;
        while len >= 1 {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            let mut i = 0;
            while i < size {
                for j in 0..lenh {
                    let idx = (lenq - self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
                i += len;
            }
            len >>= 1;
        }
        bit_reverse(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v = v.scale(inv);
        }
    }

    /// Packed coefficient halves -> slots, in place.
    pub fn fft(&self, vals: &mut [C64]) {
        let size = vals.len();
        debug_assert!(size.is_power_of_two() && size <= self.slots);
        let m = 2 * self.ring_dim;
        bit_reverse(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            let mut i = 0;
            while i < size {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
                i += len;
            }
            len <<= 1;
        }
    }

    /// O(R^2) inverse embedding, the oracle for `fft_inv`.
    pub fn embed_inv_direct(&self, slots: &[C64]) -> Vec<C64> {
        let m = 2 * self.ring_dim;
        let n = slots.len();
        (0..n)
            .map(|k| {
                let mut acc = C64::default();
                for (j, &z) in slots.iter().enumerate() {
                    let e = k * self.rot_group[j] % m;
                    acc = acc + z * self.ksi[e].conj();
                }
                acc.scale(1.0 / n as f64)
            })
            .collect()
    }

    /// O(R^2) forward embedding, the oracle for `fft`.
    pub fn embed_direct(&self, packed: &[C64]) -> Vec<C64> {
        let m = 2 * self.ring_dim;
        let n = packed.len();
        (0..n)
            .map(|j| {
                let mut acc = C64::default();
                for (k, &u) in packed.iter().enumerate() {
                    let e = k * self.rot_group[j] % m;
                    acc = acc + u * self.ksi[e];
                }
                acc
            })
            .collect()
    }
}

fn bit_reverse(vals: &mut [C64]) {
    let n = vals.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            vals.swap(i, j);
        }
    }
}

/// An encoded (unencrypted) ring element with its level and scale.
#[derive(Clone, Debug)]
pub struct Plaintext {
    pub poly: RnsPoly,
    pub level: usize,
    pub scale: f64,
    /// log2 of the largest slot magnitude, known exactly at encode
    /// time. The noise estimator multiplies error bounds by it.
    pub value_log2: f64,
}

/// Real slot values -> plaintext at the given scale and level. Inputs
/// shorter than the slot count are zero-padded on the right.
pub fn encode(
    values: &[f64],
    scale: f64,
    level: usize,
    params: &CkksParams,
) -> Result<Plaintext, CkksError> {
    let slots = params.slots();
    if values.len() > slots {
        return Err(CkksError::EncodeCapacity { len: values.len(), slots });
    }
    if values.iter().any(|v| !v.is_finite()) || !scale.is_finite() || scale <= 0.0 {
        return Err(CkksError::NonFinite);
    }
    if level > params.max_level {
        return Err(CkksError::LevelExhausted { needed: level, level: params.max_level });
    }
    let table = params.embed();
    let mut uu: Vec<C64> = values.iter().map(|&v| C64::new(v, 0.0)).collect();
    uu.resize(slots, C64::default());
    table.fft_inv(&mut uu);

    let n = params.ring_dim;
    let max_mag = (1u64 << 62) as f64;
    let mut coeffs = vec![0i64; n];
    for (k, u) in uu.iter().enumerate() {
        let re = (u.re * scale).round();
        let im = (u.im * scale).round();
        if re.abs() >= max_mag || im.abs() >= max_mag {
            return Err(CkksError::InvalidParams(
                "encoded coefficient exceeds the 62-bit arithmetic bound".into(),
            ));
        }
        coeffs[k] = re as i64;
        coeffs[k + slots] = im as i64;
    }
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Plaintext {
        poly: RnsPoly::from_signed(&coeffs, params.primes(level)),
        level,
        scale,
        value_log2: peak.log2(),
    })
}

/// Plaintext -> real slot values (always `params.slots()` of them).
///
/// Coefficients are reconstructed from the first one or two residue
/// rows, so they must stay below q_0·q_1/2 in magnitude: true for any
/// plaintext whose scale·|value| products respect the chain headroom.
pub fn decode(pt: &Plaintext, params: &CkksParams) -> Vec<f64> {
    let coeffs = centered_coeffs(&pt.poly, params);
    let slots = params.slots();
    let mut uu: Vec<C64> = (0..slots)
        .map(|k| C64::new(coeffs[k] / pt.scale, coeffs[k + slots] / pt.scale))
        .collect();
    params.embed().fft(&mut uu);
    uu.into_iter().map(|z| z.re).collect()
}

/// Centered coefficients as f64, via one- or two-prime reconstruction.
pub fn centered_coeffs(poly: &RnsPoly, params: &CkksParams) -> Vec<f64> {
    use super::arith::{center, inv_mod, mul_mod, sub_mod};
    let n = poly.n();
    if poly.rows.len() == 1 {
        let q0 = params.q(0);
        return poly.rows[0].iter().map(|&r| center(r, q0) as f64).collect();
    }
    let q0 = params.q(0);
    let q1 = params.q(1);
    let q0_inv = inv_mod(q0 % q1, q1);
    let q0q1 = q0 as i128 * q1 as i128;
    let half = q0q1 / 2;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let r0 = poly.rows[0][k];
        let r1 = poly.rows[1][k];
        let t = mul_mod(sub_mod(r1, r0 % q1, q1), q0_inv, q1);
        let mut c = r0 as i128 + q0 as i128 * center(t, q1) as i128;
        if c > half {
            c -= q0q1;
        } else if c < -half {
            c += q0q1;
        }
        out.push(c as f64);
    }
    out
}
