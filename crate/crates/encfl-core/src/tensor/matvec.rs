//! Encrypted matrix-vector products on the slot grid.
//!
//! Two complementary schemes, chosen by how the matrix is stored:
//!
//! * Scheme A (transposed weights, column-replicated input): the
//!   slot-wise product puts W[r][c]·x[c] at slot c·μ+r; a stride-μ
//!   rotate-sum collapses the column blocks so y[r] lands at slot r;
//!   masking the head and re-replicating across rows yields a
//!   row-replicated output.
//! * Scheme B (plain weights, row-replicated input): the product puts
//!   W[r][c]·x[c] at slot r·μ+c; a stride-1 rotate-sum puts y[r] at
//!   each row head; masking the heads and re-replicating along rows
//!   yields a column-replicated output.
//!
//! Outputs of one scheme are exactly the inputs of the other, so
//! layers chain with no transposes and no repacking. Both cost one
//! ciphertext product and one mask: two levels. The mask plaintext is
//! scale-steered so outputs land at exactly the parameter scale, which
//! keeps later additions aligned. The error-backpropagation products
//! Wᵀδ reuse the same stored matrices with the sums running along the
//! other grid axis, and gradient outer products δ·xᵀ are a single
//! slot-wise multiply because the replication states already spread δ
//! and x along complementary axes.

use std::collections::BTreeSet;

use crate::ckks::cipher::{he_add, he_mul, mul_plain, rotate, Ciphertext};
use crate::ckks::keys::KeySet;
use crate::ckks::params::{CkksError, CkksParams};

use super::pack::{steered_plaintext, EncMatrix, EncVector, Replication};

/// Σ_{k<count} rot(ct, k·stride): every slot j of the result holds the
/// sum of input slots j, j+stride, ..., j+(count-1)·stride (mod B).
/// Binary ladder: O(log count) rotations.
pub fn rot_sum(
    ct: &Ciphertext,
    stride: usize,
    count: usize,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    assert!(count >= 1, "empty rotate-sum");
    let slots = params.slots();
    let mut result: Option<Ciphertext> = None;
    let mut chunk = ct.clone();
    let mut span = 1usize;
    let mut offset = 0usize;
    let mut rem = count;
    loop {
        if rem & 1 == 1 {
            let part = rotate(&chunk, offset * stride % slots, keys, params)?;
            result = Some(match result {
                None => part,
                Some(r) => he_add(&r, &part, params)?,
            });
            offset += span;
        }
        rem >>= 1;
        if rem == 0 {
            break;
        }
        let shifted = rotate(&chunk, span * stride % slots, keys, params)?;
        chunk = he_add(&chunk, &shifted, params)?;
        span <<= 1;
    }
    Ok(result.expect("count >= 1"))
}

/// The rotation steps `rot_sum` will request for this stride and
/// count. Generating these as dedicated keys makes each a single
/// switch instead of a power-of-two decomposition.
pub fn rot_sum_steps(stride: usize, count: usize, slots: usize) -> BTreeSet<usize> {
    let mut steps = BTreeSet::new();
    let mut span = 1usize;
    let mut offset = 0usize;
    let mut rem = count;
    loop {
        if rem & 1 == 1 {
            let s = offset * stride % slots;
            if s != 0 {
                steps.insert(s);
            }
            offset += span;
        }
        rem >>= 1;
        if rem == 0 {
            break;
        }
        let s = span * stride % slots;
        if s != 0 {
            steps.insert(s);
        }
        span <<= 1;
    }
    steps
}

fn check_pair(w: &EncMatrix, x: &EncVector, want_t: bool, want_rep: Replication) -> Result<(), CkksError> {
    if w.layout != x.layout {
        return Err(CkksError::InvalidParams("operand layouts differ".into()));
    }
    if w.transposed != want_t {
        return Err(CkksError::InvalidParams(format!(
            "matrix stored {} but this scheme needs {}",
            if w.transposed { "transposed" } else { "plain" },
            if want_t { "transposed" } else { "plain" },
        )));
    }
    if x.replication != want_rep {
        return Err(CkksError::InvalidParams(format!(
            "input replication {:?} but this scheme needs {:?}",
            x.replication, want_rep
        )));
    }
    Ok(())
}

/// Mask the given slots to 1 and everything else to 0, landing the
/// result at exactly the parameter scale, then re-replicate by a
/// rotate-sum with the given stride and count.
fn mask_and_replicate(
    ct: &Ciphertext,
    mask: &[f64],
    rep_stride: usize,
    rep_count: usize,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    let pt = steered_plaintext(mask, ct, params.scale, params)?;
    let masked = mul_plain(ct, &pt, params)?;
    rot_sum(&masked, rep_stride, rep_count, keys, params)
}

/// Scheme A: transposed weights × column-replicated input →
/// row-replicated output of length `w.rows`.
pub fn matvec_a(
    w: &EncMatrix,
    x: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncVector, CkksError> {
    check_pair(w, x, true, Replication::ColReplicated)?;
    if x.len != w.cols {
        return Err(CkksError::InvalidParams(format!(
            "matrix has {} cols but input has {} entries",
            w.cols, x.len
        )));
    }
    let layout = w.layout;
    let p = he_mul(&w.ct, &x.ct, keys, params)?;
    let sums = rot_sum(&p, layout.mu, w.cols, keys, params)?;
    let ct = mask_and_replicate(
        &sums,
        &layout.head_mask(w.rows),
        layout.slots - layout.mu,
        layout.rows(),
        keys,
        params,
    )?;
    Ok(EncVector { ct, layout, len: w.rows, replication: Replication::RowReplicated })
}

/// Scheme B: plain weights × row-replicated input →
/// column-replicated output of length `w.rows`.
pub fn matvec_b(
    w: &EncMatrix,
    x: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncVector, CkksError> {
    check_pair(w, x, false, Replication::RowReplicated)?;
    if x.len != w.cols {
        return Err(CkksError::InvalidParams(format!(
            "matrix has {} cols but input has {} entries",
            w.cols, x.len
        )));
    }
    let layout = w.layout;
    let p = he_mul(&w.ct, &x.ct, keys, params)?;
    let sums = rot_sum(&p, 1, w.cols, keys, params)?;
    let ct = mask_and_replicate(
        &sums,
        &layout.row_head_mask(w.rows),
        layout.slots - 1,
        layout.mu,
        keys,
        params,
    )?;
    Ok(EncVector { ct, layout, len: w.rows, replication: Replication::ColReplicated })
}

/// Wᵀδ for a transposed-stored matrix and row-replicated δ:
/// column-replicated output of length `w.cols`.
pub fn backprop_a(
    w: &EncMatrix,
    delta: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncVector, CkksError> {
    check_pair(w, delta, true, Replication::RowReplicated)?;
    if delta.len != w.rows {
        return Err(CkksError::InvalidParams(format!(
            "matrix has {} rows but delta has {} entries",
            w.rows, delta.len
        )));
    }
    let layout = w.layout;
    let p = he_mul(&w.ct, &delta.ct, keys, params)?;
    let sums = rot_sum(&p, 1, w.rows, keys, params)?;
    let ct = mask_and_replicate(
        &sums,
        &layout.row_head_mask(w.cols),
        layout.slots - 1,
        layout.mu,
        keys,
        params,
    )?;
    Ok(EncVector { ct, layout, len: w.cols, replication: Replication::ColReplicated })
}

/// Wᵀδ for a plain-stored matrix and column-replicated δ:
/// row-replicated output of length `w.cols`.
pub fn backprop_b(
    w: &EncMatrix,
    delta: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncVector, CkksError> {
    check_pair(w, delta, false, Replication::ColReplicated)?;
    if delta.len != w.rows {
        return Err(CkksError::InvalidParams(format!(
            "matrix has {} rows but delta has {} entries",
            w.rows, delta.len
        )));
    }
    let layout = w.layout;
    let p = he_mul(&w.ct, &delta.ct, keys, params)?;
    let sums = rot_sum(&p, layout.mu, w.rows, keys, params)?;
    let ct = mask_and_replicate(
        &sums,
        &layout.head_mask(w.cols),
        layout.slots - layout.mu,
        layout.rows(),
        keys,
        params,
    )?;
    Ok(EncVector { ct, layout, len: w.cols, replication: Replication::RowReplicated })
}

/// δ·xᵀ landing directly in transposed storage: one slot-wise product,
/// because row-replicated δ varies with the in-row index and
/// column-replicated x varies with the row index.
pub fn outer_a(
    delta: &EncVector,
    x: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncMatrix, CkksError> {
    if delta.layout != x.layout {
        return Err(CkksError::InvalidParams("operand layouts differ".into()));
    }
    if delta.replication != Replication::RowReplicated
        || x.replication != Replication::ColReplicated
    {
        return Err(CkksError::InvalidParams(
            "transposed outer product needs row-replicated delta and column-replicated input"
                .into(),
        ));
    }
    let ct = he_mul(&delta.ct, &x.ct, keys, params)?;
    Ok(EncMatrix {
        ct,
        layout: delta.layout,
        rows: delta.len,
        cols: x.len,
        transposed: true,
    })
}

/// δ·xᵀ landing directly in plain storage.
pub fn outer_b(
    delta: &EncVector,
    x: &EncVector,
    keys: &KeySet,
    params: &CkksParams,
) -> Result<EncMatrix, CkksError> {
    if delta.layout != x.layout {
        return Err(CkksError::InvalidParams("operand layouts differ".into()));
    }
    if delta.replication != Replication::ColReplicated
        || x.replication != Replication::RowReplicated
    {
        return Err(CkksError::InvalidParams(
            "plain outer product needs column-replicated delta and row-replicated input".into(),
        ));
    }
    let ct = he_mul(&delta.ct, &x.ct, keys, params)?;
    Ok(EncMatrix {
        ct,
        layout: delta.layout,
        rows: delta.len,
        cols: x.len,
        transposed: false,
    })
}

/// Reference product for the oracles.
pub fn matvec_plain(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}
