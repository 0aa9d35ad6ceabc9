//! Slot-grid layouts and packed containers.
//!
//! A layout fixes the stride μ of a grid over B slots; the grid has
//! B/μ full rows. Matrices up to μ×μ flatten onto it row-major, either
//! plain (slot r·μ+c = W[r][c]) or transposed (slot c·μ+r = W[r][c]).
//! Vectors occupy it in one of three states: a single copy in row 0,
//! one copy per row (row-replicated, the value varies with the column
//! index), or one value per row filling that row (column-replicated,
//! the value varies with the row index). Replication is what lets a
//! slot-wise product line a vector up against either matrix axis.
//!
//! Slots outside the declared region are always zero. Operations
//! downstream rely on that: unmasked rotate-sums only stay exact
//! because padding contributes nothing.

use crate::ckks::cipher::{decrypt, encrypt, mul_plain, Ciphertext};
use crate::ckks::encoding::{decode, encode, Plaintext};
use crate::ckks::keys::{KeySet, SecretKey};
use crate::ckks::params::{CkksError, CkksParams};
use crate::ckks::serial::{deserialize_ciphertext, serialize_ciphertext};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackLayout {
    /// Grid stride μ: slots per row.
    pub mu: usize,
    /// Total slots B in the underlying vector.
    pub slots: usize,
}

impl PackLayout {
    pub fn new(mu: usize, slots: usize) -> Result<PackLayout, CkksError> {
        if mu == 0 {
            return Err(CkksError::InvalidParams("packing stride is zero".into()));
        }
        if mu * mu > slots {
            return Err(CkksError::InvalidParams(format!(
                "packing stride {mu} squared exceeds {slots} slots"
            )));
        }
        Ok(PackLayout { mu, slots })
    }

    /// Smallest stride that fits every dimension in `dims`.
    pub fn for_dims(dims: &[usize], slots: usize) -> Result<PackLayout, CkksError> {
        let mu = dims.iter().copied().max().unwrap_or(1).max(1);
        PackLayout::new(mu, slots)
    }

    /// Number of full grid rows.
    pub fn rows(&self) -> usize {
        self.slots / self.mu
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.mu + c
    }

    fn check_dim(&self, what: &str, d: usize, cap: usize) -> Result<(), CkksError> {
        if d == 0 || d > cap {
            return Err(CkksError::InvalidParams(format!(
                "{what} {d} outside 1..={cap} for stride {}",
                self.mu
            )));
        }
        Ok(())
    }

    /// Capacity of each matrix axis: the dimension stored along grid
    /// rows may reach `rows()`, the one inside a row only μ.
    fn matrix_caps(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.mu, self.rows())
        } else {
            (self.rows(), self.mu)
        }
    }

    /// 1.0 on slots 0..len, 0.0 elsewhere.
    pub fn head_mask(&self, len: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.slots];
        m[..len].fill(1.0);
        m
    }

    /// 1.0 on the first slot of rows 0..len.
    pub fn row_head_mask(&self, len: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.slots];
        for r in 0..len {
            m[self.index(r, 0)] = 1.0;
        }
        m
    }

    /// 1.0 on the rows×cols region, 0.0 on all padding.
    pub fn region_mask(&self, rows: usize, cols: usize, transposed: bool) -> Vec<f64> {
        let mut m = vec![0.0; self.slots];
        for r in 0..rows {
            for c in 0..cols {
                let idx = if transposed { self.index(c, r) } else { self.index(r, c) };
                m[idx] = 1.0;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replication {
    /// One copy in row 0: slot c = x[c].
    Single,
    /// A copy in every row: slot r·μ+c = x[c].
    RowReplicated,
    /// Row r filled with x[r]: slot r·μ+c = x[r].
    ColReplicated,
}

impl Replication {
    fn tag(self) -> u8 {
        match self {
            Replication::Single => 0,
            Replication::RowReplicated => 1,
            Replication::ColReplicated => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Replication, CkksError> {
        match t {
            0 => Ok(Replication::Single),
            1 => Ok(Replication::RowReplicated),
            2 => Ok(Replication::ColReplicated),
            _ => Err(CkksError::Format("unknown replication tag".into())),
        }
    }
}

/// A real vector laid out on the slot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedVector {
    pub layout: PackLayout,
    pub len: usize,
    pub replication: Replication,
    pub slots: Vec<f64>,
}

impl PackedVector {
    pub fn from_values(
        values: &[f64],
        layout: PackLayout,
        replication: Replication,
    ) -> Result<PackedVector, CkksError> {
        let len = values.len();
        match replication {
            Replication::Single | Replication::RowReplicated => {
                layout.check_dim("vector length", len, layout.mu)?
            }
            Replication::ColReplicated => {
                if len == 0 || len > layout.rows() {
                    return Err(CkksError::InvalidParams(format!(
                        "vector length {len} outside 1..={} grid rows",
                        layout.rows()
                    )));
                }
            }
        }
        let mut slots = vec![0.0; layout.slots];
        match replication {
            Replication::Single => slots[..len].copy_from_slice(values),
            Replication::RowReplicated => {
                for r in 0..layout.rows() {
                    for (c, &v) in values.iter().enumerate() {
                        slots[layout.index(r, c)] = v;
                    }
                }
            }
            Replication::ColReplicated => {
                for (r, &v) in values.iter().enumerate() {
                    for c in 0..layout.mu {
                        slots[layout.index(r, c)] = v;
                    }
                }
            }
        }
        Ok(PackedVector { layout, len, replication, slots })
    }

    /// The logical vector, read off the defining slots.
    pub fn values(&self) -> Vec<f64> {
        match self.replication {
            Replication::Single | Replication::RowReplicated => self.slots[..self.len].to_vec(),
            Replication::ColReplicated => {
                (0..self.len).map(|r| self.slots[self.layout.index(r, 0)]).collect()
            }
        }
    }
}

/// A real matrix laid out on the slot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    pub layout: PackLayout,
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
    pub slots: Vec<f64>,
}

impl PackedMatrix {
    pub fn from_dense(
        data: &[Vec<f64>],
        layout: PackLayout,
        transposed: bool,
    ) -> Result<PackedMatrix, CkksError> {
        let rows = data.len();
        let (row_cap, col_cap) = layout.matrix_caps(transposed);
        layout.check_dim("matrix rows", rows, row_cap)?;
        let cols = data[0].len();
        layout.check_dim("matrix cols", cols, col_cap)?;
        if data.iter().any(|r| r.len() != cols) {
            return Err(CkksError::InvalidParams("ragged matrix rows".into()));
        }
        let mut slots = vec![0.0; layout.slots];
        for (r, row) in data.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let idx = if transposed { layout.index(c, r) } else { layout.index(r, c) };
                slots[idx] = v;
            }
        }
        Ok(PackedMatrix { layout, rows, cols, transposed, slots })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| {
                        let idx = if self.transposed {
                            self.layout.index(c, r)
                        } else {
                            self.layout.index(r, c)
                        };
                        self.slots[idx]
                    })
                    .collect()
            })
            .collect()
    }
}

/// An encrypted packed vector.
#[derive(Clone)]
pub struct EncVector {
    pub ct: Ciphertext,
    pub layout: PackLayout,
    pub len: usize,
    pub replication: Replication,
}

/// An encrypted packed matrix.
#[derive(Clone)]
pub struct EncMatrix {
    pub ct: Ciphertext,
    pub layout: PackLayout,
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

fn check_he_layout(layout: PackLayout, params: &CkksParams) -> Result<(), CkksError> {
    if layout.slots != params.slots() {
        return Err(CkksError::InvalidParams(format!(
            "layout spans {} slots but parameters provide {}",
            layout.slots,
            params.slots()
        )));
    }
    Ok(())
}

pub fn encrypt_vector(
    pv: &PackedVector,
    keys: &KeySet,
    params: &CkksParams,
    seed: u64,
) -> Result<EncVector, CkksError> {
    check_he_layout(pv.layout, params)?;
    let pt = encode(&pv.slots, params.scale, params.max_level, params)?;
    Ok(EncVector {
        ct: encrypt(&pt, keys, params, seed)?,
        layout: pv.layout,
        len: pv.len,
        replication: pv.replication,
    })
}

pub fn decrypt_vector(
    ev: &EncVector,
    sk: &SecretKey,
    params: &CkksParams,
) -> Result<PackedVector, CkksError> {
    let slots = decode(&decrypt(&ev.ct, sk, params)?, params);
    Ok(PackedVector {
        layout: ev.layout,
        len: ev.len,
        replication: ev.replication,
        slots,
    })
}

pub fn encrypt_matrix(
    pm: &PackedMatrix,
    keys: &KeySet,
    params: &CkksParams,
    seed: u64,
) -> Result<EncMatrix, CkksError> {
    check_he_layout(pm.layout, params)?;
    let pt = encode(&pm.slots, params.scale, params.max_level, params)?;
    Ok(EncMatrix {
        ct: encrypt(&pt, keys, params, seed)?,
        layout: pm.layout,
        rows: pm.rows,
        cols: pm.cols,
        transposed: pm.transposed,
    })
}

pub fn decrypt_matrix(
    em: &EncMatrix,
    sk: &SecretKey,
    params: &CkksParams,
) -> Result<PackedMatrix, CkksError> {
    let slots = decode(&decrypt(&em.ct, sk, params)?, params);
    Ok(PackedMatrix {
        layout: em.layout,
        rows: em.rows,
        cols: em.cols,
        transposed: em.transposed,
        slots,
    })
}

/// Plaintext steered so multiplying `ct` by it lands the product at
/// exactly `target_scale`.
pub fn steered_plaintext(
    values: &[f64],
    ct: &Ciphertext,
    target_scale: f64,
    params: &CkksParams,
) -> Result<Plaintext, CkksError> {
    let pt_scale = target_scale * params.q(ct.level) as f64 / ct.scale;
    encode(values, pt_scale, ct.level, params)
}

/// `ct` times a scaled mask, landed at the default scale so the result
/// adds cleanly against fresh ciphertexts.
pub fn mul_masked(
    ct: &Ciphertext,
    mask: &[f64],
    factor: f64,
    params: &CkksParams,
) -> Result<Ciphertext, CkksError> {
    let scaled: Vec<f64> = mask.iter().map(|v| v * factor).collect();
    let pt = steered_plaintext(&scaled, ct, params.scale, params)?;
    mul_plain(ct, &pt, params)
}

pub const MAGIC_ENC_VECTOR: &[u8; 4] = b"CKVE";
pub const MAGIC_ENC_MATRIX: &[u8; 4] = b"CKME";

/// 16-byte header (magic, μ, len, replication) followed by the
/// ciphertext blob.
pub fn serialize_enc_vector(ev: &EncVector, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_ENC_VECTOR);
    out.extend_from_slice(&(ev.layout.mu as u32).to_le_bytes());
    out.extend_from_slice(&(ev.len as u32).to_le_bytes());
    out.push(ev.replication.tag());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&serialize_ciphertext(&ev.ct, params));
    out
}

pub fn deserialize_enc_vector(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<EncVector, CkksError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC_ENC_VECTOR {
        return Err(CkksError::Format("not an encrypted vector".into()));
    }
    let mu = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let replication = Replication::from_tag(bytes[12])?;
    if bytes[13..16] != [0, 0, 0] {
        return Err(CkksError::Format("nonzero header padding".into()));
    }
    let layout = PackLayout::new(mu, params.slots())?;
    let max_len = match replication {
        Replication::ColReplicated => layout.rows(),
        _ => layout.mu,
    };
    if len == 0 || len > max_len {
        return Err(CkksError::Format("vector length exceeds grid".into()));
    }
    let ct = deserialize_ciphertext(&bytes[16..], params)?;
    Ok(EncVector { ct, layout, len, replication })
}

/// 16-byte header (magic, μ, rows, cols, flags) followed by the
/// ciphertext blob.
pub fn serialize_enc_matrix(em: &EncMatrix, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_ENC_MATRIX);
    out.extend_from_slice(&(em.layout.mu as u32).to_le_bytes());
    out.extend_from_slice(&(em.rows as u16).to_le_bytes());
    out.extend_from_slice(&(em.cols as u16).to_le_bytes());
    out.push(u8::from(em.transposed));
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&serialize_ciphertext(&em.ct, params));
    out
}

pub fn deserialize_enc_matrix(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<EncMatrix, CkksError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC_ENC_MATRIX {
        return Err(CkksError::Format("not an encrypted matrix".into()));
    }
    let mu = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rows = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let cols = u16::from_le_bytes(bytes[10..12].try_into().unwrap()) as usize;
    let transposed = match bytes[12] {
        0 => false,
        1 => true,
        _ => return Err(CkksError::Format("unknown matrix flags".into())),
    };
    if bytes[13..16] != [0, 0, 0] {
        return Err(CkksError::Format("nonzero header padding".into()));
    }
    let layout = PackLayout::new(mu, params.slots())?;
    let (row_cap, col_cap) = layout.matrix_caps(transposed);
    if rows == 0 || rows > row_cap || cols == 0 || cols > col_cap {
        return Err(CkksError::Format("matrix dimensions exceed grid".into()));
    }
    let ct = deserialize_ciphertext(&bytes[16..], params)?;
    Ok(EncMatrix { ct, layout, rows, cols, transposed })
}
