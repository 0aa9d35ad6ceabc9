//! Model checkpoints and the wire encoding of model parameters.
//!
//! One container carries either form of a network: plaintext weights
//! as little-endian f64 in row-major layer order, or the packed
//! ciphertext blobs of an encrypted model. The kind byte makes the two
//! mutually unreadable, which the protocol's privacy scan relies on:
//! an encrypted payload must fail plaintext decoding outright, not
//! merely decode to garbage.
//!
//! Encoding is canonical. Equal models produce equal bytes, so a
//! checkpoint hash identifies the parameters and repeated runs with
//! equal seeds write byte-identical files.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ckks::params::{CkksError, CkksParams};
use crate::nn::{Activation, EncModel, LayerSpec, PlainModel};
use crate::nn::enc::EncLayer;
use crate::tensor::pack::{
    deserialize_enc_matrix, deserialize_enc_vector, serialize_enc_matrix,
    serialize_enc_vector,
};

pub const MAGIC_CHECKPOINT: &[u8; 4] = b"EFLC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layer count cap so corrupt headers cannot demand huge allocations.
const MAX_LAYERS: usize = 64;
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Ckks(#[from] CkksError),
}

fn fail(msg: impl Into<String>) -> ModelIoError {
    ModelIoError::Format(msg.into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Plain,
    Encrypted,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Plain => 0,
            CheckpointKind::Encrypted => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<CheckpointKind, ModelIoError> {
        match tag {
            0 => Ok(CheckpointKind::Plain),
            1 => Ok(CheckpointKind::Encrypted),
            t => Err(fail(format!("unknown checkpoint kind {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Plain => "plain",
            CheckpointKind::Encrypted => "encrypted",
        }
    }
}

/// Reads the container kind without decoding the body.
pub fn checkpoint_kind(bytes: &[u8]) -> Result<CheckpointKind, ModelIoError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC_CHECKPOINT {
        return Err(fail("not a model checkpoint"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    CheckpointKind::from_tag(bytes[6])
}

fn put_header(out: &mut Vec<u8>, kind: CheckpointKind, specs: &[LayerSpec]) {
    out.extend_from_slice(MAGIC_CHECKPOINT);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind.tag());
    out.push(0);
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for s in specs {
        out.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
        let act = match s.activation {
            Activation::Silu => 0u8,
            Activation::Identity => 1,
        };
        out.push(act);
        out.extend_from_slice(&[0u8; 3]);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fail("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<(), ModelIoError> {
        if self.pos != self.bytes.len() {
            return Err(fail("trailing bytes after checkpoint body"));
        }
        Ok(())
    }
}

fn read_header(
    r: &mut Reader,
    want: CheckpointKind,
) -> Result<Vec<LayerSpec>, ModelIoError> {
    if r.take(4)? != MAGIC_CHECKPOINT {
        return Err(fail("not a model checkpoint"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let kind = CheckpointKind::from_tag(r.take(1)?[0])?;
    if kind != want {
        return Err(fail(format!(
            "checkpoint holds {} parameters, expected {}",
            kind.name(),
            want.name()
        )));
    }
    if r.take(1)?[0] != 0 {
        return Err(fail("nonzero header padding"));
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > MAX_LAYERS {
        return Err(fail(format!("layer count {n_layers} out of range")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        if in_dim == 0 || in_dim > MAX_DIM || out_dim == 0 || out_dim > MAX_DIM {
            return Err(fail("layer dimension out of range"));
        }
        let activation = match r.take(1)?[0] {
            0 => Activation::Silu,
            1 => Activation::Identity,
            t => return Err(fail(format!("unknown activation tag {t}"))),
        };
        if r.take(3)? != [0, 0, 0] {
            return Err(fail("nonzero layer padding"));
        }
        specs.push(LayerSpec { in_dim, out_dim, activation });
    }
    Ok(specs)
}

pub fn encode_plain_model(m: &PlainModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, CheckpointKind::Plain, &m.specs);
    for (l, s) in m.specs.iter().enumerate() {
        for row in &m.weights[l] {
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        debug_assert_eq!(m.biases[l].len(), s.out_dim);
        for &v in &m.biases[l] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_plain_model(bytes: &[u8]) -> Result<PlainModel, ModelIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let specs = read_header(&mut r, CheckpointKind::Plain)?;
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for s in &specs {
        let mut w = Vec::with_capacity(s.in_dim);
        for _ in 0..s.in_dim {
            let mut row = Vec::with_capacity(s.out_dim);
            for _ in 0..s.out_dim {
                row.push(r.f64()?);
            }
            w.push(row);
        }
        weights.push(w);
        let mut b = Vec::with_capacity(s.out_dim);
        for _ in 0..s.out_dim {
            b.push(r.f64()?);
        }
        biases.push(b);
    }
    r.done()?;
    Ok(PlainModel { specs, weights, biases })
}

pub fn encode_enc_model(em: &EncModel, params: &CkksParams) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, CheckpointKind::Encrypted, &em.specs);
    for layer in &em.layers {
        let w = serialize_enc_matrix(&layer.w, params);
        out.extend_from_slice(&(w.len() as u64).to_le_bytes());
        out.extend_from_slice(&w);
        let b = serialize_enc_vector(&layer.b, params);
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(&b);
    }
    out
}

pub fn decode_enc_model(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<EncModel, ModelIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let specs = read_header(&mut r, CheckpointKind::Encrypted)?;
    let mut layers = Vec::with_capacity(specs.len());
    for _ in &specs {
        let wl = r.u64()? as usize;
        let w = deserialize_enc_matrix(r.take(wl)?, params)?;
        let bl = r.u64()? as usize;
        let b = deserialize_enc_vector(r.take(bl)?, params)?;
        layers.push(EncLayer { w, b });
    }
    r.done()?;
    let layout = layers[0].w.layout;
    for layer in &layers {
        if layer.w.layout != layout || layer.b.layout != layout {
            return Err(fail("layers disagree on packing layout"));
        }
    }
    Ok(EncModel { specs, layout, layers })
}

pub fn save_plain_model(path: &Path, m: &PlainModel) -> Result<(), ModelIoError> {
    Ok(fs::write(path, encode_plain_model(m))?)
}

pub fn load_plain_model(path: &Path) -> Result<PlainModel, ModelIoError> {
    decode_plain_model(&fs::read(path)?)
}

fn arch_string(specs: &[LayerSpec]) -> String {
    let mut s = format!("{}", specs[0].in_dim);
    for spec in specs {
        s.push_str(&format!("-{}({})", spec.out_dim, spec.activation.name()));
    }
    s
}

/// Human-readable sidecar describing a checkpoint: architecture,
/// parameter count, content hash, plus caller-provided lines.
pub fn manifest_text(
    checkpoint: &[u8],
    specs: &[LayerSpec],
    kind: CheckpointKind,
    extra: &[(String, String)],
) -> String {
    let params: usize = specs.iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum();
    let mut out = format!(
        "format: EFLC v{CHECKPOINT_VERSION}\nkind: {}\narchitecture: {}\nparameters: {}\nsha256: {}\n",
        kind.name(),
        arch_string(specs),
        params,
        sha256_hex(checkpoint),
    );
    for (k, v) in extra {
        out.push_str(&format!("{k}: {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::keys::{pk_gen, sk_gen};
    use crate::ckks::params::Profile;
    use crate::nn::enc::{
        decrypt_model, encrypt_model, layout_for, rotation_steps_for,
    };
    use crate::nn::plain::init_model;
    use std::sync::Arc;

    fn specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec { in_dim: 4, out_dim: 3, activation: Activation::Silu },
            LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Identity },
        ]
    }

    #[test]
    fn plain_roundtrip_is_exact_and_canonical() {
        let m = init_model(&specs(), 9).unwrap();
        let bytes = encode_plain_model(&m);
        let back = decode_plain_model(&bytes).unwrap();
        assert_eq!(back.specs, m.specs);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.biases, m.biases);
        assert_eq!(encode_plain_model(&back), bytes);
    }

    #[test]
    fn header_tampering_is_rejected() {
        let m = init_model(&specs(), 9).unwrap();
        let good = encode_plain_model(&m);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_plain_model(&bad).is_err());

        let mut bad = good.clone();
        bad[4] = 99;
        assert!(decode_plain_model(&bad).is_err());

        assert!(decode_plain_model(&good[..good.len() - 1]).is_err());

        let mut extended = good.clone();
        extended.push(0);
        assert!(decode_plain_model(&extended).is_err());

        // A huge layer count must fail before allocating.
        let mut bad = good;
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_plain_model(&bad).is_err());
    }

    #[test]
    fn encrypted_roundtrip_restores_the_model() {
        let params = Arc::new(CkksParams::profile(Profile::Toy));
        let sk = sk_gen(&params, 11);
        let specs = specs();
        let layout = layout_for(&specs, params.slots()).unwrap();
        let steps: Vec<usize> =
            rotation_steps_for(&specs, layout).into_iter().collect();
        let keys = Arc::new(pk_gen(&sk, &params, 12, &steps));

        let m = init_model(&specs, 9).unwrap();
        let em = encrypt_model(&m, layout, &keys, &params, 13).unwrap();
        let bytes = encode_enc_model(&em, &params);
        let back = decode_enc_model(&bytes, &params).unwrap();
        assert_eq!(back.specs, em.specs);
        assert_eq!(encode_enc_model(&back, &params), bytes);

        let dec = decrypt_model(&back, &sk, &params).unwrap();
        for (a, b) in dec.weights.iter().flatten().flatten().zip(
            m.weights.iter().flatten().flatten(),
        ) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn kinds_are_mutually_unreadable() {
        let params = Arc::new(CkksParams::profile(Profile::Toy));
        let sk = sk_gen(&params, 11);
        let specs = specs();
        let layout = layout_for(&specs, params.slots()).unwrap();
        let steps: Vec<usize> =
            rotation_steps_for(&specs, layout).into_iter().collect();
        let keys = Arc::new(pk_gen(&sk, &params, 12, &steps));
        let m = init_model(&specs, 9).unwrap();
        let em = encrypt_model(&m, layout, &keys, &params, 13).unwrap();

        let enc_bytes = encode_enc_model(&em, &params);
        assert!(decode_plain_model(&enc_bytes).is_err());
        assert_eq!(
            checkpoint_kind(&enc_bytes).unwrap(),
            CheckpointKind::Encrypted
        );

        let plain_bytes = encode_plain_model(&m);
        assert!(decode_enc_model(&plain_bytes, &params).is_err());
        assert_eq!(checkpoint_kind(&plain_bytes).unwrap(), CheckpointKind::Plain);
    }

    #[test]
    fn manifest_names_architecture_and_hash() {
        let m = init_model(&specs(), 9).unwrap();
        let bytes = encode_plain_model(&m);
        let text = manifest_text(
            &bytes,
            &m.specs,
            CheckpointKind::Plain,
            &[("mode".into(), "EncFL".into())],
        );
        assert!(text.contains("architecture: 4-3(silu)-2(none)"));
        assert!(text.contains("parameters: 23"));
        assert!(text.contains(&format!("sha256: {}", sha256_hex(&bytes))));
        assert!(text.ends_with("mode: EncFL\n"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.eflc");
        let m = init_model(&specs(), 9).unwrap();
        save_plain_model(&path, &m).unwrap();
        let back = load_plain_model(&path).unwrap();
        assert_eq!(back.weights, m.weights);
    }
}
