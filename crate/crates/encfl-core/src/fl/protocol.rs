//! The round engine: pre-learning setup, the local/server/aggregate
//! round loop, and the run log.
//!
//! One round is local training on every VU and one bounded training
//! pass on the server, a barrier, then the parameter mean
//!
//!   phi_g = (1/(N+1)) (sum_n phi_n + phi_s)
//!
//! redistributed to everyone. In EncFL the mean is computed on
//! ciphertexts: an addition chain, one plaintext multiplication by
//! 1/(N+1), and a refresh back to the top level. VUs always train in
//! the clear on data they kept, with the analytic activation; the
//! server always trains with the polynomial surrogate, encrypted or
//! not, so the encrypted arm differs from its plaintext baseline by
//! cipher noise alone.
//!
//! Everything is seeded through one root: shard handling, model init,
//! batch order, encryption randomness and refresh re-encryption all
//! derive from `SystemConfig::seed` under distinct tags, so a run is
//! reproducible byte for byte from its config.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::ckks::keys::{pk_gen, sk_gen, KeySet, SecretKey};
use crate::ckks::params::{CkksParams, Profile};
use crate::ckks::refresh::{derive_seed, KeyHolder, RefreshProvider, RefreshStats};
use crate::data::{one_hot, Sample, VuShard};
use crate::model_io::{
    decode_enc_model, decode_plain_model, encode_enc_model, encode_plain_model,
    sha256_hex,
};
use crate::nn::enc::{
    decrypt_model, encrypt_input, encrypt_model, encrypt_target, layout_for,
    rotation_steps_for, train_round_enc,
};
use crate::nn::plain::{argmax, forward_plain, init_model, train_round_plain};
use crate::nn::{EncModel, LayerSpec, PlainModel, PolyAct, TrainConfig};
use crate::tensor::pack::{mul_masked, EncMatrix, EncVector, PackLayout};
use crate::ckks::cipher::he_add;

use super::bus::{
    decode_enc_dataset, encode_enc_dataset, encode_plain_dataset, Bus,
    MessageKind, Party,
};
use super::{ConvergenceRule, FlError, Mode};

/// One vehicle client. The coalition key never appears in any server
/// structure; only VUs can decrypt.
pub struct VuState {
    pub id: usize,
    pub offload_fraction: f64,
    pub retained: Vec<Sample>,
    /// Present only between setup and the offload send.
    pub offloaded: Option<Vec<Sample>>,
    pub model: PlainModel,
    pub coalition: Option<CoalitionKeys>,
    pub train_seed: u64,
    /// Training pairs built once from `retained`.
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone)]
pub struct CoalitionKeys {
    pub sk: Arc<SecretKey>,
    pub keys: Arc<KeySet>,
}

/// The central server. By construction this type has no secret-key
/// field; nothing here can decrypt.
pub struct ServerState {
    pub enc_data: Vec<(EncVector, EncVector)>,
    pub plain_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub plain_count: usize,
    /// Working model for the plaintext modes; in EncFL it stays at the
    /// public initial model.
    pub model: PlainModel,
    pub enc_model: Option<EncModel>,
    pub enc_global: Option<EncModel>,
    pub keys: Option<Arc<KeySet>>,
    pub round: u64,
    pub train_seed: u64,
}

#[derive(Clone, Debug)]
pub struct SystemConfig {
    pub mode: Mode,
    pub n_rsus: usize,
    pub specs: Vec<LayerSpec>,
    /// VU-side hyperparameters; the seed field is replaced per VU.
    pub local: TrainConfig,
    /// Server-side hyperparameters; fractional epochs bound the cost
    /// of the encrypted pass.
    pub server: TrainConfig,
    pub profile: Option<Profile>,
    pub seed: u64,
    pub t_max: u64,
    pub convergence: ConvergenceRule,
}

/// Wall-clock per phase; excluded from the deterministic round log.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PhaseTimings {
    pub local_ms: f64,
    pub server_ms: f64,
    pub aggregate_ms: f64,
    pub distribute_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: u64,
    /// One entry per VU; None when the VU had nothing to train on.
    pub vu_losses: Vec<Option<f64>>,
    /// None in CFL (no server training) and in EncFL (the server
    /// cannot read its own loss).
    pub server_loss: Option<f64>,
    pub model_hash: String,
    pub val_accuracy: Option<f64>,
    /// Bus traffic this round.
    pub message_bytes: u64,
    #[serde(skip)]
    pub timing: PhaseTimings,
}

/// The deterministic per-round log line.
pub fn round_log_line(r: &RoundRecord) -> String {
    serde_json::to_string(r).expect("round record serializes")
}

/// The wall-clock sidecar line, kept out of the deterministic log.
pub fn timing_log_line(r: &RoundRecord) -> String {
    let mut t = serde_json::to_value(r.timing).expect("timings serialize");
    t.as_object_mut()
        .expect("timings are an object")
        .insert("round".into(), r.round.into());
    serde_json::Value::Object(t.as_object().cloned().unwrap()).to_string()
}

pub struct RunOutcome {
    pub final_model: PlainModel,
    pub records: Vec<RoundRecord>,
    pub converged_at: Option<u64>,
    /// Set when a round failed after its retry; records up to the
    /// failed round are preserved.
    pub aborted: Option<String>,
    pub violations: Vec<String>,
    pub refresh: RefreshStats,
}

pub struct System {
    pub cfg: SystemConfig,
    pub vus: Vec<VuState>,
    pub server: ServerState,
    pub bus: Bus,
    pub params: Option<Arc<CkksParams>>,
    pub layout: Option<PackLayout>,
    pub records: Vec<RoundRecord>,
    refresher: Option<RefreshProvider>,
    act: PolyAct,
    val: Vec<Sample>,
    total_samples: usize,
    enc_params_seed: u64,
}

fn tag(label: &[u8], parts: &[u64]) -> Vec<u8> {
    let mut t = label.to_vec();
    for p in parts {
        t.extend_from_slice(&p.to_le_bytes());
    }
    t
}

/// The surrogate every server-side pass uses. Shallow profiles get the
/// shallow fit so its evaluation ladder fits their modulus chain.
fn poly_for(profile: Option<Profile>) -> PolyAct {
    match profile {
        Some(Profile::Toy) => PolyAct::silu_shallow(),
        _ => PolyAct::silu_default(),
    }
}

fn training_pairs(samples: &[Sample], classes: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    samples
        .iter()
        .map(|s| (s.features.clone(), one_hot(s.label, classes)))
        .collect()
}

/// Offload split, key setup, data delivery and model distribution.
///
/// `fractions[n]` is VU n's offload fraction p_n and must match the
/// shard split: |offloaded| = round(p_n * |shard|).
pub fn pre_learning(
    cfg: SystemConfig,
    fractions: &[f64],
    shards: Vec<VuShard>,
    val: Vec<Sample>,
) -> Result<System, FlError> {
    let n_vus = shards.len();
    if n_vus == 0 {
        return Err(FlError::Config("at least one VU is required".into()));
    }
    if fractions.len() != n_vus {
        return Err(FlError::Config(format!(
            "{} offload fractions for {} VUs",
            fractions.len(),
            n_vus
        )));
    }
    if cfg.n_rsus == 0 {
        return Err(FlError::Config("at least one RSU is required".into()));
    }
    if cfg.specs.is_empty() {
        return Err(FlError::Config("empty network architecture".into()));
    }
    cfg.local.validate()?;
    cfg.server.validate()?;
    cfg.convergence.validate()?;

    let in_dim = cfg.specs[0].in_dim;
    let classes = cfg.specs.last().unwrap().out_dim;
    for (n, (shard, &p)) in shards.iter().zip(fractions).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(FlError::Config(format!(
                "vu {n}: offload fraction {p} outside [0, 1]"
            )));
        }
        let d_n = shard.retained.len() + shard.offloaded.len();
        if d_n == 0 {
            return Err(FlError::Config(format!("vu {n} has no data")));
        }
        let want = (p * d_n as f64).round() as usize;
        if shard.offloaded.len() != want {
            return Err(FlError::Config(format!(
                "vu {n}: offloaded {} of {} samples, fraction {p} requires {want}",
                shard.offloaded.len(),
                d_n
            )));
        }
        if cfg.mode == Mode::Cfl && !shard.offloaded.is_empty() {
            return Err(FlError::Config(format!(
                "vu {n}: CFL offloads nothing, got {} samples",
                shard.offloaded.len()
            )));
        }
        for s in shard.retained.iter().chain(&shard.offloaded) {
            if s.features.len() != in_dim {
                return Err(FlError::Config(format!(
                    "vu {n}: sample width {} does not match input {in_dim}",
                    s.features.len()
                )));
            }
            if s.label >= classes {
                return Err(FlError::Config(format!(
                    "vu {n}: label {} outside the {classes}-way output",
                    s.label
                )));
            }
        }
    }
    for s in &val {
        if s.features.len() != in_dim || s.label >= classes {
            return Err(FlError::Config("validation sample shape mismatch".into()));
        }
    }

    // Cipher side: coalition keys from the lowest-id VU, the refresh
    // service bound to that same holder.
    let mut params = None;
    let mut layout = None;
    let mut coalition = None;
    let mut refresher = None;
    if cfg.mode == Mode::EncFl {
        let profile = cfg.profile.ok_or_else(|| {
            FlError::Config("EncFL requires a cipher profile".into())
        })?;
        let p = Arc::new(CkksParams::profile(profile));
        let lay = layout_for(&cfg.specs, p.slots())?;
        let steps: Vec<usize> =
            rotation_steps_for(&cfg.specs, lay).into_iter().collect();
        let sk_seed = derive_seed(cfg.seed, b"coalition-sk");
        let sk = sk_gen(&p, sk_seed);
        let keys = Arc::new(pk_gen(
            &sk,
            &p,
            derive_seed(cfg.seed, b"coalition-pk"),
            &steps,
        ));
        let holder = KeyHolder::new(
            p.clone(),
            sk_gen(&p, sk_seed),
            keys.clone(),
            derive_seed(cfg.seed, b"refresh"),
        );
        refresher = Some(RefreshProvider::interactive(Box::new(holder)));
        coalition = Some(CoalitionKeys { sk: Arc::new(sk), keys });
        params = Some(p);
        layout = Some(lay);
    }

    let global = init_model(&cfg.specs, derive_seed(cfg.seed, b"init"))?;
    let mut bus = Bus::new(cfg.n_rsus, cfg.mode == Mode::EncFl, params.clone());
    let enc_data_seed = derive_seed(cfg.seed, b"enc-data");
    let enc_params_seed = derive_seed(cfg.seed, b"enc-params");

    let total_samples: usize = shards
        .iter()
        .map(|s| s.retained.len() + s.offloaded.len())
        .sum::<usize>();

    // Round 0: the initial global model travels in the clear, before
    // any data leaves a VU.
    let initial_payload = encode_plain_model(&global);
    let mut vus = Vec::with_capacity(n_vus);
    for (n, (shard, &p)) in shards.into_iter().zip(fractions).enumerate() {
        bus.deliver(
            0,
            MessageKind::DistributeGlobal,
            Party::Server,
            Party::Vu(n),
            &initial_payload,
        );
        let pairs = training_pairs(&shard.retained, classes);
        vus.push(VuState {
            id: n,
            offload_fraction: p,
            retained: shard.retained,
            offloaded: Some(shard.offloaded),
            model: global.clone(),
            coalition: coalition.clone(),
            train_seed: derive_seed(cfg.seed, &tag(b"vu-train", &[n as u64])),
            pairs,
        });
    }

    let mut server = ServerState {
        enc_data: Vec::new(),
        plain_pairs: Vec::new(),
        plain_count: 0,
        model: global.clone(),
        enc_model: None,
        enc_global: None,
        keys: coalition.as_ref().map(|c| c.keys.clone()),
        round: 0,
        train_seed: derive_seed(cfg.seed, b"server-train"),
    };

    // Offload phase: every VU ships its DS_n, encrypted in EncFL.
    for vu in &mut vus {
        let offloaded = vu.offloaded.take().unwrap();
        if offloaded.is_empty() {
            continue;
        }
        match cfg.mode {
            Mode::EncFl => {
                let p = params.as_ref().unwrap();
                let keys = &vu.coalition.as_ref().unwrap().keys;
                let lay = layout.unwrap();
                let mut enc = Vec::with_capacity(offloaded.len());
                for (i, s) in offloaded.iter().enumerate() {
                    let sx = derive_seed(
                        enc_data_seed,
                        &tag(b"x", &[vu.id as u64, i as u64]),
                    );
                    let st = derive_seed(
                        enc_data_seed,
                        &tag(b"t", &[vu.id as u64, i as u64]),
                    );
                    let x = encrypt_input(&s.features, lay, keys, p, sx)?;
                    let t = encrypt_target(
                        &one_hot(s.label, classes),
                        cfg.specs.len(),
                        lay,
                        keys,
                        p,
                        st,
                    )?;
                    enc.push((x, t));
                }
                let payload = encode_enc_dataset(&enc, p);
                bus.deliver(
                    0,
                    MessageKind::OffloadData,
                    Party::Vu(vu.id),
                    Party::Server,
                    &payload,
                );
                server.enc_data.extend(decode_enc_dataset(&payload, p)?);
            }
            Mode::NEncFl => {
                let payload = encode_plain_dataset(&offloaded);
                bus.deliver(
                    0,
                    MessageKind::OffloadData,
                    Party::Vu(vu.id),
                    Party::Server,
                    &payload,
                );
                let received = crate::data::decode_samples(&payload)?;
                server.plain_count += received.len();
                server.plain_pairs.extend(training_pairs(&received, classes));
            }
            Mode::Cfl => unreachable!("CFL shards carry no offload"),
        }
    }

    if cfg.mode == Mode::EncFl {
        let p = params.as_ref().unwrap();
        let keys = server.keys.as_ref().unwrap();
        let lay = layout.unwrap();
        server.enc_global = Some(encrypt_model(
            &global,
            lay,
            keys,
            p,
            derive_seed(cfg.seed, b"enc-global"),
        )?);
        server.enc_model = Some(encrypt_model(
            &global,
            lay,
            keys,
            p,
            derive_seed(cfg.seed, b"enc-server"),
        )?);
    }

    let act = poly_for(cfg.profile);
    Ok(System {
        cfg,
        vus,
        server,
        bus,
        params,
        layout,
        records: Vec::new(),
        refresher,
        act,
        val,
        total_samples,
        enc_params_seed,
    })
}

/// Plain parameter mean. Participants must be shape-congruent; the
/// error names the first offender.
pub fn aggregate_plain(parts: &[&PlainModel]) -> Result<PlainModel, FlError> {
    let first = parts.first().ok_or_else(|| {
        FlError::Config("aggregation needs at least one participant".into())
    })?;
    for (i, m) in parts.iter().enumerate().skip(1) {
        if m.specs != first.specs {
            return Err(FlError::Shape {
                vu: i,
                detail: format!(
                    "architecture {:?} does not match {:?}",
                    m.specs, first.specs
                ),
            });
        }
    }
    let k = parts.len() as f64;
    let mut out = (*first).clone();
    for m in &parts[1..] {
        for (wl, ml) in out.weights.iter_mut().zip(&m.weights) {
            for (wr, mr) in wl.iter_mut().zip(ml) {
                for (w, v) in wr.iter_mut().zip(mr) {
                    *w += v;
                }
            }
        }
        for (bl, ml) in out.biases.iter_mut().zip(&m.biases) {
            for (b, v) in bl.iter_mut().zip(ml) {
                *b += v;
            }
        }
    }
    for wl in &mut out.weights {
        for wr in wl {
            for w in wr {
                *w /= k;
            }
        }
    }
    for bl in &mut out.biases {
        for b in bl {
            *b /= k;
        }
    }
    Ok(out)
}

/// Ciphertext parameter mean: addition chain, one multiplication by
/// 1/k, refresh back to the top.
pub fn aggregate_enc(
    parts: &[&EncModel],
    params: &CkksParams,
    refresher: &mut RefreshProvider,
) -> Result<EncModel, FlError> {
    let first = parts.first().ok_or_else(|| {
        FlError::Config("aggregation needs at least one participant".into())
    })?;
    for (i, m) in parts.iter().enumerate().skip(1) {
        if m.specs != first.specs || m.layout != first.layout {
            return Err(FlError::Shape {
                vu: i,
                detail: format!(
                    "architecture {:?} does not match {:?}",
                    m.specs, first.specs
                ),
            });
        }
    }
    let inv = 1.0 / parts.len() as f64;
    let ones = vec![1.0; params.slots()];
    let mut layers = Vec::with_capacity(first.layers.len());
    for l in 0..first.layers.len() {
        let mut w_sum = first.layers[l].w.ct.clone();
        let mut b_sum = first.layers[l].b.ct.clone();
        for m in &parts[1..] {
            w_sum = he_add(&w_sum, &m.layers[l].w.ct, params)?;
            b_sum = he_add(&b_sum, &m.layers[l].b.ct, params)?;
        }
        let w_ct = refresher.refresh(&mul_masked(&w_sum, &ones, inv, params)?, params)?;
        let b_ct = refresher.refresh(&mul_masked(&b_sum, &ones, inv, params)?, params)?;
        let wm = &first.layers[l].w;
        let bm = &first.layers[l].b;
        layers.push(crate::nn::enc::EncLayer {
            w: EncMatrix {
                ct: w_ct,
                layout: wm.layout,
                rows: wm.rows,
                cols: wm.cols,
                transposed: wm.transposed,
            },
            b: EncVector {
                ct: b_ct,
                layout: bm.layout,
                len: bm.len,
                replication: bm.replication,
            },
        });
    }
    Ok(EncModel { specs: first.specs.clone(), layout: first.layout, layers })
}

/// Plaintext inference: argmax over the analytic forward pass.
pub fn classify(m: &PlainModel, x: &[f64]) -> Result<usize, FlError> {
    Ok(argmax(&forward_plain(m, x, None)?))
}

enum Locals {
    Plain(Vec<PlainModel>),
    Enc(Vec<EncModel>),
}

impl System {
    fn refresh_stats(&self) -> RefreshStats {
        self.refresher.as_ref().map(|r| r.stats()).unwrap_or_default()
    }

    fn held_samples(&self) -> usize {
        let server = match self.cfg.mode {
            Mode::EncFl => self.server.enc_data.len(),
            _ => self.server.plain_count,
        };
        self.vus
            .iter()
            .map(|v| {
                v.retained.len() + v.offloaded.as_ref().map_or(0, Vec::len)
            })
            .sum::<usize>()
            + server
    }

    /// Every VU trains on what it kept and submits parameters.
    /// Returns per-VU losses and the submitted payloads.
    fn local_phase(
        &mut self,
        tau: u64,
    ) -> Result<(Vec<Option<f64>>, Vec<Vec<u8>>), FlError> {
        let mut losses = Vec::with_capacity(self.vus.len());
        let mut payloads = Vec::with_capacity(self.vus.len());
        for vu in &mut self.vus {
            let cfg_n = TrainConfig {
                rng_seed: vu.train_seed,
                ..self.cfg.local.clone()
            };
            let loss = if vu.pairs.is_empty() || cfg_n.epochs_per_round == 0.0 {
                None
            } else {
                Some(train_round_plain(&mut vu.model, &vu.pairs, &cfg_n, tau, None)?)
            };
            losses.push(loss);
            let payload = match self.cfg.mode {
                Mode::EncFl => {
                    let p = self.params.as_ref().unwrap();
                    let keys = &vu.coalition.as_ref().unwrap().keys;
                    let em = encrypt_model(
                        &vu.model,
                        self.layout.unwrap(),
                        keys,
                        p,
                        derive_seed(
                            self.enc_params_seed,
                            &tag(b"submit", &[tau, vu.id as u64]),
                        ),
                    )?;
                    encode_enc_model(&em, p)
                }
                _ => encode_plain_model(&vu.model),
            };
            self.bus.deliver(
                tau,
                MessageKind::SubmitLocalParams,
                Party::Vu(vu.id),
                Party::Server,
                &payload,
            );
            payloads.push(payload);
        }
        Ok((losses, payloads))
    }

    /// One bounded training pass on the server's share. The encrypted
    /// pass is retried once from a snapshot on refresh failure.
    fn server_phase(&mut self, tau: u64) -> Result<Option<f64>, FlError> {
        let cfg_s = TrainConfig {
            rng_seed: self.server.train_seed,
            ..self.cfg.server.clone()
        };
        match self.cfg.mode {
            Mode::Cfl => Ok(None),
            Mode::NEncFl => {
                if self.server.plain_pairs.is_empty() || cfg_s.epochs_per_round == 0.0 {
                    return Ok(None);
                }
                let loss = train_round_plain(
                    &mut self.server.model,
                    &self.server.plain_pairs,
                    &cfg_s,
                    tau,
                    Some(&self.act),
                )?;
                Ok(Some(loss))
            }
            Mode::EncFl => {
                if self.server.enc_data.is_empty() || cfg_s.epochs_per_round == 0.0 {
                    return Ok(None);
                }
                let p = self.params.as_ref().unwrap().clone();
                let keys = self.server.keys.as_ref().unwrap().clone();
                let snapshot = self.server.enc_model.clone();
                let first = train_round_enc(
                    self.server.enc_model.as_mut().unwrap(),
                    &self.server.enc_data,
                    &cfg_s,
                    tau,
                    &self.act,
                    &keys,
                    &p,
                    self.refresher.as_mut().unwrap(),
                );
                if let Err(first) = first {
                    self.server.enc_model = snapshot;
                    train_round_enc(
                        self.server.enc_model.as_mut().unwrap(),
                        &self.server.enc_data,
                        &cfg_s,
                        tau,
                        &self.act,
                        &keys,
                        &p,
                        self.refresher.as_mut().unwrap(),
                    )
                    .map_err(|second| {
                        FlError::Config(format!(
                            "round {tau} server pass failed twice: {first}; retry: {second}"
                        ))
                    })?;
                }
                // The server cannot decrypt its own loss.
                Ok(None)
            }
        }
    }

    /// Barrier: mean the N local parameter sets (plus the server's
    /// where it trains) into the next global model.
    fn aggregate_phase(
        &mut self,
        payloads: &[Vec<u8>],
    ) -> Result<(String, Vec<u8>), FlError> {
        let locals = match self.cfg.mode {
            Mode::EncFl => {
                let p = self.params.as_ref().unwrap();
                let mut v = Vec::with_capacity(payloads.len());
                for b in payloads {
                    v.push(decode_enc_model(b, p)?);
                }
                Locals::Enc(v)
            }
            _ => {
                let mut v = Vec::with_capacity(payloads.len());
                for b in payloads {
                    v.push(decode_plain_model(b)?);
                }
                Locals::Plain(v)
            }
        };
        match locals {
            Locals::Enc(models) => {
                let p = self.params.as_ref().unwrap().clone();
                let mut parts: Vec<&EncModel> = models.iter().collect();
                parts.push(self.server.enc_model.as_ref().unwrap());
                let agg =
                    aggregate_enc(&parts, &p, self.refresher.as_mut().unwrap())?;
                let payload = encode_enc_model(&agg, &p);
                let hash = sha256_hex(&payload);
                self.server.enc_model = Some(agg.clone());
                self.server.enc_global = Some(agg);
                Ok((hash, payload))
            }
            Locals::Plain(models) => {
                let mut parts: Vec<&PlainModel> = models.iter().collect();
                if self.cfg.mode == Mode::NEncFl {
                    parts.push(&self.server.model);
                }
                let agg = aggregate_plain(&parts)?;
                let payload = encode_plain_model(&agg);
                let hash = sha256_hex(&payload);
                self.server.model = agg;
                Ok((hash, payload))
            }
        }
    }

    /// Send the new global model to every VU; VUs decrypt it.
    fn redistribute(&mut self, tau: u64, payload: &[u8]) -> Result<(), FlError> {
        let global = match self.cfg.mode {
            Mode::EncFl => {
                let p = self.params.as_ref().unwrap();
                let em = decode_enc_model(payload, p)?;
                let sk = &self.vus[0].coalition.as_ref().unwrap().sk;
                decrypt_model(&em, sk, p)?
            }
            _ => decode_plain_model(payload)?,
        };
        for vu in &mut self.vus {
            self.bus.deliver(
                tau,
                MessageKind::GlobalUpdate,
                Party::Server,
                Party::Vu(vu.id),
                payload,
            );
            vu.model = global.clone();
        }
        Ok(())
    }

    fn validation_accuracy(&self) -> Result<Option<f64>, FlError> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let m = &self.vus[0].model;
        let mut correct = 0usize;
        for s in &self.val {
            if classify(m, &s.features)? == s.label {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / self.val.len() as f64))
    }

    /// The learning loop. Round failures abort the run with the log so
    /// far; every success appends one record.
    pub fn run_protocol(&mut self) -> RunOutcome {
        let mut acc_history = Vec::new();
        let mut converged_at = None;
        let mut aborted = None;
        for tau in 1..=self.cfg.t_max {
            match self.run_round(tau, &mut acc_history) {
                Ok(()) => {}
                Err(e) => {
                    aborted = Some(format!("round {tau}: {e}"));
                    break;
                }
            }
            if self.cfg.convergence.converged(&acc_history) {
                converged_at = Some(tau);
                break;
            }
        }
        RunOutcome {
            final_model: self.vus[0].model.clone(),
            records: self.records.clone(),
            converged_at,
            aborted,
            violations: self.bus.violations.clone(),
            refresh: self.refresh_stats(),
        }
    }

    fn run_round(
        &mut self,
        tau: u64,
        acc_history: &mut Vec<f64>,
    ) -> Result<(), FlError> {
        let bytes_before = self.bus.total_bytes();
        let refresh_before = self.refresh_stats();

        let t0 = Instant::now();
        let (vu_losses, payloads) = self.local_phase(tau)?;
        let t1 = Instant::now();
        let server_loss = self.server_phase(tau)?;
        let t2 = Instant::now();
        let (model_hash, global_payload) = self.aggregate_phase(&payloads)?;
        let t3 = Instant::now();
        self.redistribute(tau, &global_payload)?;
        let t4 = Instant::now();

        let refresh_after = self.refresh_stats();
        self.bus.count_refresh(
            tau,
            0,
            refresh_after.request_bytes - refresh_before.request_bytes,
            refresh_after.response_bytes - refresh_before.response_bytes,
        );

        if self.held_samples() != self.total_samples {
            return Err(FlError::Config(format!(
                "data conservation violated: hold {} of {} samples",
                self.held_samples(),
                self.total_samples
            )));
        }

        let val_accuracy = self.validation_accuracy()?;
        if let Some(a) = val_accuracy {
            acc_history.push(a);
        }
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        self.records.push(RoundRecord {
            round: tau,
            vu_losses,
            server_loss,
            model_hash,
            val_accuracy,
            message_bytes: self.bus.total_bytes() - bytes_before,
            timing: PhaseTimings {
                local_ms: ms(t0, t1),
                server_ms: ms(t1, t2),
                aggregate_ms: ms(t2, t3),
                distribute_ms: ms(t3, t4),
            },
        });
        self.server.round = tau;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::refresh::RecryptService;
    use crate::ckks::params::CkksError;
    use crate::nn::enc::classify_enc;
    use crate::nn::plain::PolyAct;
    use crate::nn::Activation;
    use crate::tensor::pack::decrypt_vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::cell::Cell;
    use std::rc::Rc;

    fn specs() -> Vec<LayerSpec> {
        vec![LayerSpec { in_dim: 4, out_dim: 3, activation: Activation::Silu }]
    }

    /// Three separable clusters in four dimensions.
    fn clustered(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let features = (0..4)
                    .map(|d| {
                        let center = if d == label { 0.9 } else { 0.1 };
                        center + rng.gen_range(-0.05..0.05)
                    })
                    .collect();
                Sample { features, label }
            })
            .collect()
    }

    fn shard(samples: Vec<Sample>, p: f64) -> VuShard {
        let k = (p * samples.len() as f64).round() as usize;
        let mut retained = samples;
        let offloaded = retained.split_off(retained.len() - k);
        VuShard { retained, offloaded }
    }

    fn base_cfg(mode: Mode) -> SystemConfig {
        SystemConfig {
            mode,
            n_rsus: 2,
            specs: specs(),
            local: TrainConfig {
                learning_rate: 0.1,
                batch_size: 4,
                epochs_per_round: 1.0,
                rng_seed: 0,
            },
            server: TrainConfig {
                learning_rate: 0.1,
                batch_size: 4,
                epochs_per_round: 1.0,
                rng_seed: 0,
            },
            profile: match mode {
                Mode::EncFl => Some(Profile::Toy),
                _ => None,
            },
            seed: 7,
            t_max: 3,
            convergence: ConvergenceRule { window: 5, min_delta_pp: 0.0 },
        }
    }

    fn two_vu_system(mode: Mode, p: f64, t_max: u64) -> System {
        let mut cfg = base_cfg(mode);
        cfg.t_max = t_max;
        if mode == Mode::NEncFl || mode == Mode::EncFl {
            // Identical surrogate in both arms.
            cfg.profile = Some(Profile::Toy);
        }
        let shards = vec![
            shard(clustered(8, 1), p),
            shard(clustered(8, 2), p),
        ];
        pre_learning(cfg, &[p, p], shards, clustered(12, 3)).unwrap()
    }

    #[test]
    fn pre_learning_validates_and_distributes() {
        let sys = two_vu_system(Mode::NEncFl, 0.25, 3);
        assert_eq!(sys.vus.len(), 2);
        // 8 samples at p = 0.25 offload 2 each.
        for vu in &sys.vus {
            assert_eq!(vu.retained.len(), 6);
            assert!(vu.offloaded.is_none());
        }
        assert_eq!(sys.server.plain_count, 4);
        assert_eq!(sys.total_samples, 16);
        assert_eq!(sys.held_samples(), 16);
        // Round 0 traffic: 2 distributions and 2 offloads.
        assert_eq!(sys.bus.bytes_by_kind.len(), 2);
        assert_eq!(sys.bus.log.len(), 4);

        let cfg = base_cfg(Mode::NEncFl);
        let bad = pre_learning(
            cfg.clone(),
            &[1.5, 0.0],
            vec![shard(clustered(8, 1), 0.0), shard(clustered(8, 2), 0.0)],
            vec![],
        );
        assert!(matches!(bad, Err(FlError::Config(_))));

        // Fraction and shard must agree.
        let bad = pre_learning(
            cfg.clone(),
            &[0.5, 0.0],
            vec![shard(clustered(8, 1), 0.25), shard(clustered(8, 2), 0.0)],
            vec![],
        );
        assert!(matches!(bad, Err(FlError::Config(_))));

        // CFL refuses offloaded data.
        let bad = pre_learning(
            base_cfg(Mode::Cfl),
            &[0.25],
            vec![shard(clustered(8, 1), 0.25)],
            vec![],
        );
        assert!(matches!(bad, Err(FlError::Config(_))));

        // EncFL without a profile is underspecified.
        let mut cfg = base_cfg(Mode::EncFl);
        cfg.profile = None;
        let bad = pre_learning(
            cfg,
            &[0.0],
            vec![shard(clustered(8, 1), 0.0)],
            vec![],
        );
        assert!(matches!(bad, Err(FlError::Config(_))));
    }

    #[test]
    fn zero_epochs_round_keeps_the_global_model() {
        let mut cfg = base_cfg(Mode::NEncFl);
        cfg.local.epochs_per_round = 0.0;
        cfg.server.epochs_per_round = 0.0;
        cfg.t_max = 1;
        let shards = vec![shard(clustered(8, 1), 0.25), shard(clustered(8, 2), 0.25)];
        let mut sys = pre_learning(cfg, &[0.25, 0.25], shards, vec![]).unwrap();
        let initial = encode_plain_model(&sys.vus[0].model);

        // With nothing to train, every VU submits the received global.
        let (losses, payloads) = sys.local_phase(1).unwrap();
        assert_eq!(losses, vec![None, None]);
        for p in &payloads {
            assert_eq!(*p, initial);
        }

        let out = sys.run_protocol();
        assert!(out.aborted.is_none());
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].server_loss, None);
        // Averaging identical copies moves nothing beyond the last ulp.
        let start = decode_plain_model(&initial).unwrap();
        for (x, y) in out
            .final_model
            .weights
            .iter()
            .flatten()
            .flatten()
            .zip(start.weights.iter().flatten().flatten())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn t_max_zero_returns_the_initial_model() {
        let mut sys = two_vu_system(Mode::Cfl, 0.0, 0);
        let before = encode_plain_model(&sys.vus[0].model);
        let out = sys.run_protocol();
        assert!(out.records.is_empty());
        assert_eq!(encode_plain_model(&out.final_model), before);
    }

    #[test]
    fn local_submissions_decrypt_to_the_trained_params() {
        let mut a = two_vu_system(Mode::EncFl, 0.25, 1);
        let mut b = two_vu_system(Mode::EncFl, 0.25, 1);
        let (losses, payloads) = a.local_phase(1).unwrap();
        assert!(losses.iter().all(Option::is_some));

        // Reconstructing the system reproduces the exact ciphertexts.
        let (_, payloads_b) = b.local_phase(1).unwrap();
        assert_eq!(payloads, payloads_b);

        let p = a.params.as_ref().unwrap();
        for (vu, payload) in a.vus.iter().zip(&payloads) {
            let em = decode_enc_model(payload, p).unwrap();
            let dec = decrypt_model(&em, &vu.coalition.as_ref().unwrap().sk, p).unwrap();
            for (x, y) in dec
                .weights
                .iter()
                .flatten()
                .flatten()
                .zip(vu.model.weights.iter().flatten().flatten())
            {
                assert!((x - y).abs() < 1e-3, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn empty_server_share_is_a_noop_round() {
        let mut sys = two_vu_system(Mode::EncFl, 0.0, 2);
        let before = encode_enc_model(
            sys.server.enc_model.as_ref().unwrap(),
            sys.params.as_ref().unwrap(),
        );
        assert_eq!(sys.server_phase(1).unwrap(), None);
        let after = encode_enc_model(
            sys.server.enc_model.as_ref().unwrap(),
            sys.params.as_ref().unwrap(),
        );
        assert_eq!(before, after);

        // The protocol still runs as pure federated averaging.
        let out = sys.run_protocol();
        assert!(out.aborted.is_none());
        assert_eq!(out.records.len(), 2);
        assert!(out.violations.is_empty());
    }

    #[test]
    fn encrypted_server_pass_matches_plain_mirror() {
        let mut sys = two_vu_system(Mode::EncFl, 0.5, 1);
        let p = sys.params.as_ref().unwrap().clone();
        let sk = sys.vus[0].coalition.as_ref().unwrap().sk.clone();

        // The mirror trains the decrypted share with the surrogate.
        let mut mirror =
            decrypt_model(sys.server.enc_model.as_ref().unwrap(), &sk, &p).unwrap();
        let share: Vec<(Vec<f64>, Vec<f64>)> = sys
            .server
            .enc_data
            .iter()
            .map(|(x, t)| {
                (
                    decrypt_vector(x, &sk, &p).unwrap().values(),
                    decrypt_vector(t, &sk, &p).unwrap().values(),
                )
            })
            .collect();
        let cfg_s = TrainConfig {
            rng_seed: sys.server.train_seed,
            ..sys.cfg.server.clone()
        };
        train_round_plain(&mut mirror, &share, &cfg_s, 1, Some(&sys.act)).unwrap();

        sys.server_phase(1).unwrap();
        let dec =
            decrypt_model(sys.server.enc_model.as_ref().unwrap(), &sk, &p).unwrap();
        for (x, y) in dec
            .weights
            .iter()
            .flatten()
            .flatten()
            .zip(mirror.weights.iter().flatten().flatten())
        {
            assert!((x - y).abs() < 5e-2, "{x} vs {y}");
        }
    }

    #[test]
    fn plain_aggregation_is_the_mean() {
        let a = init_model(&specs(), 1).unwrap();
        let b = init_model(&specs(), 2).unwrap();
        let c = init_model(&specs(), 3).unwrap();

        let solo = aggregate_plain(&[&a]).unwrap();
        assert_eq!(encode_plain_model(&solo), encode_plain_model(&a));

        let mean = aggregate_plain(&[&a, &b, &c]).unwrap();
        for l in 0..1 {
            for i in 0..4 {
                for j in 0..3 {
                    let want = (a.weights[l][i][j] + b.weights[l][i][j] + c.weights[l][i][j]) / 3.0;
                    assert!((mean.weights[l][i][j] - want).abs() < 1e-12);
                }
            }
        }

        let other = vec![LayerSpec { in_dim: 5, out_dim: 3, activation: Activation::Silu }];
        let bad = init_model(&other, 4).unwrap();
        match aggregate_plain(&[&a, &bad]) {
            Err(FlError::Shape { vu, .. }) => assert_eq!(vu, 1),
            other => panic!("expected shape error, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn encrypted_aggregation_matches_the_plain_mean() {
        let params = Arc::new(CkksParams::profile(Profile::Test));
        let sk = sk_gen(&params, 51);
        let keys = Arc::new(pk_gen(&sk, &params, 52, &[]));
        let layout = layout_for(&specs(), params.slots()).unwrap();
        let mut refresher = RefreshProvider::test_oracle(
            params.clone(),
            sk_gen(&params, 51),
            keys.clone(),
            61,
        );

        let models: Vec<PlainModel> =
            (0..3).map(|i| init_model(&specs(), 10 + i).unwrap()).collect();
        let enc: Vec<EncModel> = models
            .iter()
            .enumerate()
            .map(|(i, m)| encrypt_model(m, layout, &keys, &params, 70 + i as u64).unwrap())
            .collect();

        let parts: Vec<&EncModel> = enc.iter().collect();
        let agg = aggregate_enc(&parts, &params, &mut refresher).unwrap();
        let dec = decrypt_model(&agg, &sk, &params).unwrap();
        let want = aggregate_plain(&models.iter().collect::<Vec<_>>()).unwrap();

        // Bound: three fresh-encryption errors and one plaintext product.
        let bound = 3.0 * 1e-6 + 1e-4;
        for (x, y) in dec
            .weights
            .iter()
            .flatten()
            .flatten()
            .zip(want.weights.iter().flatten().flatten())
        {
            assert!((x - y).abs() < bound, "{x} vs {y}");
        }
        for (x, y) in
            dec.biases.iter().flatten().zip(want.biases.iter().flatten())
        {
            assert!((x - y).abs() < bound, "{x} vs {y}");
        }

        // Participant order cannot matter.
        let swapped: Vec<&EncModel> = vec![&enc[2], &enc[0], &enc[1]];
        let agg2 = aggregate_enc(&swapped, &params, &mut refresher).unwrap();
        let dec2 = decrypt_model(&agg2, &sk, &params).unwrap();
        for (x, y) in dec2
            .weights
            .iter()
            .flatten()
            .flatten()
            .zip(dec.weights.iter().flatten().flatten())
        {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_vu_cfl_adopts_that_vus_model() {
        let mut cfg = base_cfg(Mode::Cfl);
        cfg.t_max = 1;
        let data = clustered(8, 1);
        let mut sys =
            pre_learning(cfg.clone(), &[0.0], vec![shard(data.clone(), 0.0)], vec![])
                .unwrap();

        // Mirror the lone VU's round by hand.
        let mut mirror = sys.vus[0].model.clone();
        let cfg_0 = TrainConfig {
            rng_seed: sys.vus[0].train_seed,
            ..cfg.local.clone()
        };
        let pairs = training_pairs(&data, 3);
        train_round_plain(&mut mirror, &pairs, &cfg_0, 1, None).unwrap();

        let out = sys.run_protocol();
        assert!(out.aborted.is_none());
        assert_eq!(out.records[0].server_loss, None);
        assert_eq!(
            encode_plain_model(&out.final_model),
            encode_plain_model(&mirror)
        );
        assert_eq!(
            out.records[0].model_hash,
            sha256_hex(&encode_plain_model(&mirror))
        );
    }

    #[test]
    fn identical_seeds_reproduce_the_run_exactly() {
        let mut a = two_vu_system(Mode::EncFl, 0.25, 2);
        let mut b = two_vu_system(Mode::EncFl, 0.25, 2);
        let out_a = a.run_protocol();
        let out_b = b.run_protocol();
        assert!(out_a.aborted.is_none());
        assert!(out_a.violations.is_empty());
        assert!(out_a.refresh.calls > 0);

        let lines_a: Vec<String> = out_a.records.iter().map(round_log_line).collect();
        let lines_b: Vec<String> = out_b.records.iter().map(round_log_line).collect();
        assert_eq!(lines_a, lines_b);
        assert_eq!(
            encode_plain_model(&out_a.final_model),
            encode_plain_model(&out_b.final_model)
        );

        // Losses exist, the server's stays unreadable, traffic counted.
        assert!(out_a.records[0].vu_losses.iter().all(Option::is_some));
        assert_eq!(out_a.records[0].server_loss, None);
        assert!(out_a.records[0].message_bytes > 0);
        assert!(out_a.records[0].val_accuracy.is_some());
    }

    #[test]
    fn encrypted_arm_tracks_its_plain_baseline() {
        let mut enc = two_vu_system(Mode::EncFl, 0.25, 6);
        let mut plain = two_vu_system(Mode::NEncFl, 0.25, 6);
        let out_enc = enc.run_protocol();
        let out_plain = plain.run_protocol();
        assert!(out_enc.aborted.is_none());
        assert!(out_plain.aborted.is_none());
        assert_eq!(out_enc.records.len(), out_plain.records.len());

        for (x, y) in out_enc
            .final_model
            .weights
            .iter()
            .flatten()
            .flatten()
            .zip(out_plain.final_model.weights.iter().flatten().flatten())
        {
            assert!((x - y).abs() < 0.1, "weights diverged: {x} vs {y}");
        }
        for (x, y) in out_enc
            .final_model
            .biases
            .iter()
            .flatten()
            .zip(out_plain.final_model.biases.iter().flatten())
        {
            assert!((x - y).abs() < 0.1, "biases diverged: {x} vs {y}");
        }

        // Same VU-side plaintext trajectories means identical losses.
        for (ra, rb) in out_enc.records.iter().zip(&out_plain.records) {
            for (la, lb) in ra.vu_losses.iter().zip(&rb.vu_losses) {
                let (la, lb) = (la.unwrap(), lb.unwrap());
                assert!((la - lb).abs() < 0.05, "{la} vs {lb}");
            }
        }
    }

    /// Fails the first `failures` recrypt calls, then delegates.
    struct Flaky {
        inner: KeyHolder,
        failures: Rc<Cell<u32>>,
    }

    impl RecryptService for Flaky {
        fn recrypt(&self, request: &[u8]) -> Result<Vec<u8>, CkksError> {
            let left = self.failures.get();
            if left > 0 {
                self.failures.set(left - 1);
                return Err(CkksError::Format("simulated refresh outage".into()));
            }
            self.inner.recrypt(request)
        }
    }

    fn with_flaky_refresher(sys: &mut System, failures: u32) -> Rc<Cell<u32>> {
        let p = sys.params.as_ref().unwrap().clone();
        let keys = sys.server.keys.as_ref().unwrap().clone();
        let sk = sk_gen(&p, derive_seed(sys.cfg.seed, b"coalition-sk"));
        let holder =
            KeyHolder::new(p, sk, keys, derive_seed(sys.cfg.seed, b"refresh"));
        let counter = Rc::new(Cell::new(failures));
        sys.refresher = Some(RefreshProvider::interactive(Box::new(Flaky {
            inner: holder,
            failures: counter.clone(),
        })));
        counter
    }

    #[test]
    fn refresh_outage_is_retried_then_aborts() {
        // One failure: the retry succeeds and the run completes.
        let mut sys = two_vu_system(Mode::EncFl, 0.25, 2);
        with_flaky_refresher(&mut sys, 1);
        let out = sys.run_protocol();
        assert!(out.aborted.is_none(), "{:?}", out.aborted);
        assert_eq!(out.records.len(), 2);

        // A dead service aborts the experiment with partial logs.
        let mut sys = two_vu_system(Mode::EncFl, 0.25, 3);
        with_flaky_refresher(&mut sys, u32::MAX);
        let out = sys.run_protocol();
        let reason = out.aborted.expect("run must abort");
        assert!(reason.contains("round 1"), "{reason}");
        assert!(reason.contains("twice"), "{reason}");
        assert!(out.records.is_empty());
    }

    #[test]
    fn flat_validation_accuracy_converges() {
        let mut cfg = base_cfg(Mode::Cfl);
        // Zero learning rate pins the model, so accuracy is constant.
        cfg.local.learning_rate = 0.0;
        cfg.t_max = 50;
        cfg.convergence = ConvergenceRule { window: 5, min_delta_pp: 0.1 };
        let mut sys = pre_learning(
            cfg,
            &[0.0],
            vec![shard(clustered(9, 1), 0.0)],
            clustered(9, 4),
        )
        .unwrap();
        let out = sys.run_protocol();
        assert_eq!(out.converged_at, Some(6));
        assert_eq!(out.records.len(), 6);
    }

    #[test]
    fn classify_follows_the_dominant_weight() {
        let mut m = init_model(&specs(), 5).unwrap();
        for row in &mut m.weights[0] {
            row[2] = 50.0;
        }
        for i in 0..10 {
            let x = vec![0.1 * i as f64 + 0.05; 4];
            assert_eq!(classify(&m, &x).unwrap(), 2);
        }
        // Deterministic for a fixed input.
        let x = vec![0.3, 0.1, 0.7, 0.2];
        assert_eq!(classify(&m, &x).unwrap(), classify(&m, &x).unwrap());
    }

    #[test]
    fn encrypted_scores_agree_with_plaintext_argmax() {
        // Train a small model in the clear until the clusters separate,
        // then compare encrypted and plaintext inference.
        let data = clustered(30, 8);
        let pairs = training_pairs(&data, 3);
        let mut m = init_model(&specs(), 9).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.3,
            batch_size: 8,
            epochs_per_round: 1.0,
            rng_seed: 17,
        };
        for round in 0..30 {
            train_round_plain(&mut m, &pairs, &cfg, round, None).unwrap();
        }

        let params = Arc::new(CkksParams::profile(Profile::Test));
        let layout = layout_for(&specs(), params.slots()).unwrap();
        let sk = sk_gen(&params, 71);
        let steps: Vec<usize> =
            rotation_steps_for(&specs(), layout).into_iter().collect();
        let keys = Arc::new(pk_gen(&sk, &params, 72, &steps));
        let mut refresher = RefreshProvider::test_oracle(
            params.clone(),
            sk_gen(&params, 71),
            keys.clone(),
            73,
        );
        let em = encrypt_model(&m, layout, &keys, &params, 74).unwrap();
        let act = PolyAct::silu_default();

        let points = clustered(50, 12);
        let mut agree = 0;
        for (i, s) in points.iter().enumerate() {
            let x = encrypt_input(&s.features, layout, &keys, &params, 100 + i as u64)
                .unwrap();
            let scores =
                classify_enc(&em, &x, &act, &keys, &params, &mut refresher).unwrap();
            let dec = decrypt_vector(&scores, &sk, &params).unwrap().values();
            if argmax(&dec) == classify(&m, &s.features).unwrap() {
                agree += 1;
            }
        }
        assert!(agree >= 49, "only {agree}/50 agreed");
    }

    #[test]
    fn round_log_lines_are_stable_json() {
        let r = RoundRecord {
            round: 3,
            vu_losses: vec![Some(0.5), None],
            server_loss: None,
            model_hash: "abc".into(),
            val_accuracy: Some(0.75),
            message_bytes: 1024,
            timing: PhaseTimings {
                local_ms: 1.0,
                server_ms: 2.0,
                aggregate_ms: 3.0,
                distribute_ms: 4.0,
            },
        };
        let line = round_log_line(&r);
        assert_eq!(
            line,
            r#"{"round":3,"vu_losses":[0.5,null],"server_loss":null,"model_hash":"abc","val_accuracy":0.75,"message_bytes":1024}"#
        );
        let t = timing_log_line(&r);
        assert!(t.contains(r#""round":3"#));
        assert!(t.contains(r#""local_ms":1.0"#));
    }
}
