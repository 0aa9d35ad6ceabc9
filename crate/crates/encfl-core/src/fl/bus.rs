//! The in-process message fabric between VUs, RSUs and the server.
//!
//! Delivery is a function call, so ordering and reliability are free;
//! what the bus actually provides is accounting and policing. Every
//! message is logged with its size and relay, bytes are tallied per
//! message kind and per RSU, and when privacy enforcement is on every
//! payload delivered to the server is scanned: data and parameter
//! payloads must parse as ciphertext containers and must fail every
//! plaintext decoding this crate has. Violations are recorded, never
//! silently dropped, so a run can be failed on them afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::ckks::params::CkksParams;
use crate::ckks::serial::is_ciphertext_blob;
use crate::data::{decode_samples, Sample};
use crate::model_io::{decode_enc_model, decode_plain_model};
use crate::tensor::pack::{
    deserialize_enc_vector, serialize_enc_vector, EncVector,
};

use super::FlError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageKind {
    OffloadData,
    DistributeGlobal,
    SubmitLocalParams,
    RefreshRequest,
    RefreshResponse,
    GlobalUpdate,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::OffloadData => "offload_data",
            MessageKind::DistributeGlobal => "distribute_global",
            MessageKind::SubmitLocalParams => "submit_local_params",
            MessageKind::RefreshRequest => "refresh_request",
            MessageKind::RefreshResponse => "refresh_response",
            MessageKind::GlobalUpdate => "global_update",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Party {
    Vu(usize),
    Server,
}

/// What the log keeps about one delivered message.
#[derive(Clone, Copy, Debug)]
pub struct MessageMeta {
    pub round: u64,
    pub kind: MessageKind,
    pub sender: Party,
    pub receiver: Party,
    pub relay: Option<usize>,
    pub bytes: usize,
}

pub struct Bus {
    n_rsus: usize,
    /// Scan server-bound payloads; on for EncFL, where plaintext
    /// anywhere near the server is a protocol violation.
    enforce_privacy: bool,
    params: Option<Arc<CkksParams>>,
    pub log: Vec<MessageMeta>,
    pub bytes_by_kind: BTreeMap<&'static str, u64>,
    pub rsu_bytes: Vec<u64>,
    pub violations: Vec<String>,
}

impl Bus {
    pub fn new(
        n_rsus: usize,
        enforce_privacy: bool,
        params: Option<Arc<CkksParams>>,
    ) -> Bus {
        assert!(n_rsus > 0, "at least one relay");
        assert!(
            !enforce_privacy || params.is_some(),
            "privacy scan needs cipher parameters"
        );
        Bus {
            n_rsus,
            enforce_privacy,
            params,
            log: Vec::new(),
            bytes_by_kind: BTreeMap::new(),
            rsu_bytes: vec![0; n_rsus],
            violations: Vec::new(),
        }
    }

    /// VUs stick to one relay so per-RSU traffic is meaningful.
    pub fn relay_for(&self, vu: usize) -> usize {
        vu % self.n_rsus
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_by_kind.values().sum()
    }

    pub fn deliver(
        &mut self,
        round: u64,
        kind: MessageKind,
        sender: Party,
        receiver: Party,
        payload: &[u8],
    ) {
        let relay = match (sender, receiver) {
            (Party::Vu(n), Party::Server) | (Party::Server, Party::Vu(n)) => {
                Some(self.relay_for(n))
            }
            _ => None,
        };
        if let Some(r) = relay {
            self.rsu_bytes[r] += payload.len() as u64;
        }
        *self.bytes_by_kind.entry(kind.name()).or_insert(0) += payload.len() as u64;
        self.log.push(MessageMeta {
            round,
            kind,
            sender,
            receiver,
            relay,
            bytes: payload.len(),
        });
        if self.enforce_privacy && receiver == Party::Server {
            if let Err(why) = self.scan(kind, payload) {
                self.violations.push(format!(
                    "round {round}: {} from {sender:?}: {why}",
                    kind.name()
                ));
            }
        }
    }

    /// Refresh traffic is brokered by the provider, not sent message
    /// by message; fold its per-round totals into the accounting as
    /// one request/response pair against the key holder's relay.
    pub fn count_refresh(
        &mut self,
        round: u64,
        key_holder: usize,
        request_bytes: u64,
        response_bytes: u64,
    ) {
        if request_bytes == 0 && response_bytes == 0 {
            return;
        }
        let relay = self.relay_for(key_holder);
        self.rsu_bytes[relay] += request_bytes + response_bytes;
        *self.bytes_by_kind.entry(MessageKind::RefreshRequest.name()).or_insert(0) +=
            request_bytes;
        *self.bytes_by_kind.entry(MessageKind::RefreshResponse.name()).or_insert(0) +=
            response_bytes;
        self.log.push(MessageMeta {
            round,
            kind: MessageKind::RefreshRequest,
            sender: Party::Server,
            receiver: Party::Vu(key_holder),
            relay: Some(relay),
            bytes: request_bytes as usize,
        });
        self.log.push(MessageMeta {
            round,
            kind: MessageKind::RefreshResponse,
            sender: Party::Vu(key_holder),
            receiver: Party::Server,
            relay: Some(relay),
            bytes: response_bytes as usize,
        });
    }

    fn scan(&self, kind: MessageKind, payload: &[u8]) -> Result<(), String> {
        let params = self.params.as_ref().expect("scan without parameters");
        // Any plaintext decoding succeeding on a server-bound payload
        // is a leak regardless of the declared kind.
        if decode_plain_model(payload).is_ok() {
            return Err("payload decodes as a plaintext model".into());
        }
        if decode_samples(payload).is_ok() {
            return Err("payload decodes as plaintext samples".into());
        }
        match kind {
            MessageKind::OffloadData => {
                let n = decode_enc_dataset(payload, params)
                    .map_err(|e| format!("not a valid encrypted dataset: {e}"))?
                    .len();
                if n == 0 {
                    return Err("empty encrypted dataset payload".into());
                }
            }
            MessageKind::SubmitLocalParams => {
                decode_enc_model(payload, params)
                    .map_err(|e| format!("not a valid encrypted model: {e}"))?;
            }
            MessageKind::RefreshResponse => {
                if !is_ciphertext_blob(payload, params) {
                    return Err("refresh response is not a ciphertext".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

pub const MAGIC_ENC_DATASET: &[u8; 4] = b"EFDE";
const ENC_DATASET_VERSION: u16 = 1;

/// Encrypted (input, target) pairs as one offload payload.
pub fn encode_enc_dataset(
    samples: &[(EncVector, EncVector)],
    params: &CkksParams,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_ENC_DATASET);
    out.extend_from_slice(&ENC_DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&[0u8; 2]);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for (x, t) in samples {
        for blob in [serialize_enc_vector(x, params), serialize_enc_vector(t, params)] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
    }
    out
}

pub fn decode_enc_dataset(
    bytes: &[u8],
    params: &CkksParams,
) -> Result<Vec<(EncVector, EncVector)>, FlError> {
    let bad = |msg: &str| FlError::Config(format!("encrypted dataset payload: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC_ENC_DATASET {
        return Err(bad("bad magic"));
    }
    if u16::from_le_bytes(bytes[4..6].try_into().unwrap()) != ENC_DATASET_VERSION {
        return Err(bad("unsupported version"));
    }
    if bytes[6..8] != [0, 0] {
        return Err(bad("nonzero padding"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos: usize = 12;
    let mut take = |n: usize| -> Result<&[u8], FlError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let xl = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let x = deserialize_enc_vector(take(xl)?, params)?;
        let tl = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let t = deserialize_enc_vector(take(tl)?, params)?;
        out.push((x, t));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Plaintext offload payload used by the unencrypted baselines.
pub fn encode_plain_dataset(samples: &[Sample]) -> Vec<u8> {
    crate::data::encode_samples(samples)
}
