//! Polynomial activations by Chebyshev interpolation.
//!
//! Nonlinear activations cannot run under the encryption directly, so
//! each one is replaced by a polynomial fitted on a working interval
//! [lo, hi]. The fit interpolates at the Chebyshev nodes
//! cos(π(k+1/2)/n), which keeps the error within a small factor of the
//! best possible polynomial of that degree and avoids the endpoint
//! oscillation a uniform grid would produce. A degree-15 fit of
//! x·sigmoid(x) on [-8, 8] stays below 1e-2, which is finer than the
//! noise the training loop tolerates anyway.
//!
//! Two plain evaluators are kept side by side: Clenshaw recurrence on
//! the Chebyshev coefficients (numerically the reference) and Horner
//! on the equivalent monomial coefficients. The encrypted evaluator
//! consumes the monomial form with a balanced product tree: powers
//! u, u², u⁴, ... come from repeated squaring, and a polynomial of n
//! coefficients splits as lo(u) + u^{n/2}·hi(u). Both halves of every
//! split finish at the same level, so the tree spends exactly
//! 1 + log₂(n) levels: one for the affine map into [-1, 1] and one per
//! halving. Subtree scales drift off the parameter scale as rescale
//! primes differ slightly from it; every join steers the lower half
//! onto the upper half's exact scale with a multiply by ones, so
//! additions never see mismatched scales.
//!
//! Training needs the activation's slope as well. `derivative` applies
//! the Chebyshev recurrence d_{k-1} = d_{k+1} + 2k·c_k to the fitted
//! coefficients, so backward passes use the exact slope of the fitted
//! polynomial rather than of the function it approximates. The two
//! stay consistent with the forward pass even where the fit and the
//! true activation disagree.

use crate::ckks::cipher::{add_plain, he_add, he_mul, mul_plain, Ciphertext};
use crate::ckks::encoding::encode;
use crate::ckks::keys::KeySet;
use crate::ckks::params::{CkksError, CkksParams};

use super::pack::steered_plaintext;

/// A polynomial fitted to a scalar function on [lo, hi], stored in
/// both Chebyshev and monomial bases over u = (2x - lo - hi)/(hi - lo).
#[derive(Debug, Clone)]
pub struct ChebFit {
    pub lo: f64,
    pub hi: f64,
    pub degree: usize,
    /// Chebyshev coefficients, c[0] already halved for Clenshaw.
    pub cheb_coeffs: Vec<f64>,
    /// Monomial coefficients in u, zero-padded to a power of two.
    pub mono_coeffs: Vec<f64>,
}

fn cheb_to_mono(cheb: &[f64]) -> Vec<f64> {
    let n = cheb.len();
    let padded = n.next_power_of_two().max(2);
    let mut mono = vec![0.0; padded];
    // T_0 = 1, T_1 = u, T_{k+1} = 2u·T_k - T_{k-1}.
    let mut t_prev = vec![0.0; n];
    let mut t_cur = vec![0.0; n];
    t_prev[0] = 1.0;
    mono[0] += cheb[0];
    if n > 1 {
        t_cur[1] = 1.0;
        for (m, t) in mono.iter_mut().zip(&t_cur) {
            *m += cheb[1] * t;
        }
    }
    for ck in &cheb[2.min(n)..] {
        let mut t_next = vec![0.0; n];
        for j in 0..n - 1 {
            t_next[j + 1] += 2.0 * t_cur[j];
        }
        for (tn, tp) in t_next.iter_mut().zip(&t_prev) {
            *tn -= tp;
        }
        for (m, t) in mono.iter_mut().zip(&t_next) {
            *m += ck * t;
        }
        t_prev = t_cur;
        t_cur = t_next;
    }
    mono
}

impl ChebFit {
    /// Interpolate `f` at the degree+1 Chebyshev nodes of [lo, hi].
    pub fn fit(
        f: impl Fn(f64) -> f64,
        lo: f64,
        hi: f64,
        degree: usize,
    ) -> Result<ChebFit, CkksError> {
        if degree == 0 {
            return Err(CkksError::InvalidParams(
                "polynomial degree must be at least 1".into(),
            ));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(CkksError::InvalidParams(format!(
                "fit interval [{lo}, {hi}] is not a proper range"
            )));
        }
        let n = degree + 1;
        let samples: Vec<f64> = (0..n)
            .map(|k| {
                let t = (std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos();
                f((hi - lo) / 2.0 * t + (hi + lo) / 2.0)
            })
            .collect();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(CkksError::NonFinite);
        }
        let mut cheb = Vec::with_capacity(n);
        for j in 0..n {
            let s: f64 = samples
                .iter()
                .enumerate()
                .map(|(k, fv)| {
                    fv * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / n as f64).cos()
                })
                .sum();
            cheb.push(2.0 * s / n as f64);
        }
        cheb[0] /= 2.0;
        let mono_coeffs = cheb_to_mono(&cheb);
        Ok(ChebFit { lo, hi, degree, cheb_coeffs: cheb, mono_coeffs })
    }

    fn to_unit(&self, x: f64) -> f64 {
        (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
    }

    /// Clenshaw evaluation of the Chebyshev form.
    pub fn eval_plain(&self, x: f64) -> f64 {
        let u = self.to_unit(x);
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for ck in self.cheb_coeffs.iter().skip(1).rev() {
            let next = 2.0 * u * b1 - b2 + ck;
            b2 = b1;
            b1 = next;
        }
        u * b1 - b2 + self.cheb_coeffs[0]
    }

    /// Horner evaluation of the monomial form. This is the quantity
    /// the encrypted tree reproduces.
    pub fn eval_mono(&self, x: f64) -> f64 {
        let u = self.to_unit(x);
        self.mono_coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    /// Exact derivative of the fitted polynomial, on the same interval.
    pub fn derivative(&self) -> ChebFit {
        let deg = self.degree;
        let c = &self.cheb_coeffs;
        let mut d = vec![0.0; deg + 2];
        for k in (1..=deg).rev() {
            d[k - 1] = d[k + 1] + 2.0 * k as f64 * c[k];
        }
        d[0] /= 2.0;
        d.truncate(deg.max(1));
        let du_dx = 2.0 / (self.hi - self.lo);
        for v in &mut d {
            *v *= du_dx;
        }
        let mono_coeffs = cheb_to_mono(&d);
        ChebFit {
            lo: self.lo,
            hi: self.hi,
            degree: deg.saturating_sub(1),
            cheb_coeffs: d,
            mono_coeffs,
        }
    }

    /// Levels the encrypted evaluation consumes: one for the affine
    /// map plus one per halving of the coefficient list.
    pub fn levels_required(&self) -> usize {
        1 + self.mono_coeffs.len().trailing_zeros() as usize
    }

    /// Evaluate the polynomial slot-wise under the encryption.
    ///
    /// The fit has no idea of the plaintext's actual range; values
    /// outside [lo, hi] get whatever the polynomial does out there,
    /// which diverges fast at high degree. Callers keep inputs inside
    /// the interval.
    pub fn eval_ct(
        &self,
        ct: &Ciphertext,
        keys: &KeySet,
        params: &CkksParams,
    ) -> Result<Ciphertext, CkksError> {
        let need = self.levels_required();
        if ct.level < need {
            return Err(CkksError::LevelExhausted { needed: need, level: ct.level });
        }
        let slots = params.slots();
        let alpha = 2.0 / (self.hi - self.lo);
        let beta = -(self.hi + self.lo) / (self.hi - self.lo);

        let pt_a = steered_plaintext(&vec![alpha; slots], ct, params.scale, params)?;
        let scaled = mul_plain(ct, &pt_a, params)?;
        let pt_b = encode(&vec![beta; slots], scaled.scale, scaled.level, params)?;
        let u = add_plain(&scaled, &pt_b, params)?;

        // u^(2^j) for every power the tree joins on.
        let stages = self.mono_coeffs.len().trailing_zeros() as usize;
        let mut powers = Vec::with_capacity(stages);
        powers.push(u);
        for j in 1..stages {
            let sq = he_mul(&powers[j - 1], &powers[j - 1], keys, params)?;
            powers.push(sq);
        }
        tree_eval(&self.mono_coeffs, &powers, slots, keys, params)
    }
}

/// lo(u) + u^{n/2}·hi(u) over a power-of-two coefficient slice. Both
/// halves land on the same level; the lower half is steered onto the
/// upper product's exact scale before the join.
fn tree_eval(
    coeffs: &[f64],
    powers: &[Ciphertext],
    slots: usize,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    let n = coeffs.len();
    let u = &powers[0];
    if n == 2 {
        let pt1 = steered_plaintext(&vec![coeffs[1]; slots], u, params.scale, params)?;
        let linear = mul_plain(u, &pt1, params)?;
        let pt0 = encode(&vec![coeffs[0]; slots], linear.scale, linear.level, params)?;
        return add_plain(&linear, &pt0, params);
    }
    let h = n / 2;
    let lo_part = tree_eval(&coeffs[..h], powers, slots, keys, params)?;
    let hi_part = tree_eval(&coeffs[h..], powers, slots, keys, params)?;
    let join = he_mul(&powers[h.trailing_zeros() as usize], &hi_part, keys, params)?;
    let pt_one = steered_plaintext(&vec![1.0; slots], &lo_part, join.scale, params)?;
    let lo_aligned = mul_plain(&lo_part, &pt_one, params)?;
    he_add(&lo_aligned, &join, params)
}
