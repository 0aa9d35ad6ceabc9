//! Named runtime invariant checks, runnable at any cipher profile.
//!
//! Each check re-establishes one documented property of a module with
//! fresh seeded randomness and reports pass/fail plus a measurement.
//! The suite is the executable form of the per-module invariant lists:
//! cipher error bounds, packing algebra, approximation quality,
//! gradient soundness, protocol conservation and determinism, data
//! pipeline exactness and metric identities.
//!
//! Everything is seeded from one base, so two runs with the same
//! profile and seed print identical reports.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ckks::arith::is_prime;
use crate::ckks::cipher::{
    decrypt_values, encrypt_values, he_add, he_mul, mul_plain, rotate,
};
use crate::ckks::encoding::encode;
use crate::ckks::keys::{default_rotation_steps, pk_gen, sk_gen};
use crate::ckks::params::{CkksError, CkksParams, Profile};
use crate::ckks::refresh::{derive_seed, RefreshProvider};
use crate::config::ExperimentConfig;
use crate::data::{
    rebalance, shard_for_vus, synth_generate, Sample, Scaling, SynthSpec,
    VuShard, CLASS_COUNT,
};
use crate::fl::{
    aggregate_enc, aggregate_plain, pre_learning, round_log_line, Mode,
    ConvergenceRule, SystemConfig,
};
use crate::metrics::{summarize, ConfusionMatrix};
use crate::nn::enc::{
    decrypt_model, encrypt_input, encrypt_model, forward_enc, layout_for,
    rotation_steps_for, train_round_enc,
};
use crate::nn::plain::{
    forward_plain, init_model, loss_and_grads_plain, silu, train_round_plain,
};
use crate::nn::{Activation, LayerSpec, PolyAct, TrainConfig};
use crate::tensor::matvec::{matvec_a, matvec_plain, rot_sum_steps};
use crate::tensor::pack::{
    decrypt_matrix, decrypt_vector, encrypt_matrix, encrypt_vector,
    PackLayout, PackedMatrix, PackedVector, Replication,
};

/// Round-trip slot error bound; holds at every built-in profile.
const EPS0: f64 = 1e-6;
/// Single-multiplication slot error bound for unit-sized values.
const EPS1: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Bound check with the measured value in the detail string.
fn bounded(name: &'static str, measured: f64, bound: f64) -> CheckResult {
    check(
        name,
        measured.is_finite() && measured < bound,
        format!("max error {measured:.3e}, bound {bound:.1e}"),
    )
}

fn rand_unit(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// One named verdict per cipher-parameter invariant. A corrupted
/// chain fails exactly the invariants it violates, by name.
pub fn chain_invariants(
    ring_dim: usize,
    chain: &[u64],
    ks_prime: u64,
    scale: f64,
) -> Vec<(&'static str, Option<String>)> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, violation: Option<String>| {
        out.push((name, violation));
    };

    push(
        "ring-dimension-power-of-two",
        (!ring_dim.is_power_of_two() || ring_dim < 8)
            .then(|| format!("ring dimension {ring_dim}")),
    );
    push(
        "chain-nonempty",
        chain.is_empty().then(|| "empty modulus chain".into()),
    );
    let mut seen = chain.to_vec();
    seen.push(ks_prime);
    seen.sort_unstable();
    push(
        "primes-distinct",
        seen.windows(2)
            .find(|w| w[0] == w[1])
            .map(|w| format!("duplicate modulus {}", w[0])),
    );
    push(
        "moduli-prime",
        chain
            .iter()
            .chain(std::iter::once(&ks_prime))
            .find(|&&q| !is_prime(q))
            .map(|q| format!("composite modulus {q}")),
    );
    let two_r = 2 * ring_dim as u64;
    push(
        "moduli-ntt-compatible",
        chain
            .iter()
            .chain(std::iter::once(&ks_prime))
            .find(|&&q| two_r == 0 || q % two_r != 1)
            .map(|q| format!("modulus {q} != 1 mod {two_r}")),
    );
    push(
        "scale-positive-finite",
        (!(scale.is_finite() && scale > 0.0)).then(|| format!("scale {scale}")),
    );
    push(
        "rescale-primes-near-scale",
        chain
            .iter()
            .skip(1)
            .find(|&&q| {
                let r = q as f64 / scale;
                !(0.5..=2.0).contains(&r)
            })
            .map(|q| format!("rescale prime {q} far from scale {scale:.3e}")),
    );
    push(
        "keyswitch-prime-dominates",
        chain
            .iter()
            .max()
            .filter(|&&m| ks_prime <= m)
            .map(|m| format!("ks prime {ks_prime} <= chain max {m}")),
    );
    out
}

/// A deliberately broken parameter set: one chain prime replaced by an
/// even composite that is also NTT-incompatible.
pub fn corrupted_chain_fixture() -> (usize, Vec<u64>, u64, f64) {
    let p = CkksParams::profile(Profile::Test);
    let mut chain = p.modulus_chain.clone();
    let mid = chain.len() / 2;
    chain[mid] = chain[mid] - 1;
    (p.ring_dim, chain, p.ks_prime, p.scale)
}

struct Rig {
    params: Arc<CkksParams>,
    sk: crate::ckks::keys::SecretKey,
    keys: Arc<crate::ckks::keys::KeySet>,
}

fn rig(profile: Profile, seed: u64, extra: &[usize]) -> Rig {
    let params = Arc::new(CkksParams::profile(profile));
    let sk = sk_gen(&params, derive_seed(seed, b"verify-sk"));
    let mut steps: Vec<usize> =
        default_rotation_steps(params.slots()).into_iter().collect();
    steps.extend_from_slice(extra);
    let keys = Arc::new(pk_gen(
        &sk,
        &params,
        derive_seed(seed, b"verify-pk"),
        &steps,
    ));
    Rig { params, sk, keys }
}

fn cipher_checks(profile: Profile, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let r = rig(profile, seed, &[]);
    let (params, sk, keys) = (&r.params, &r.sk, &r.keys);
    let slots = params.slots();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"cipher"));

    // Round trip and addition.
    let mut worst_rt: f64 = 0.0;
    let mut worst_add: f64 = 0.0;
    for i in 0..40u64 {
        let v = rand_unit(&mut rng, slots);
        let w = rand_unit(&mut rng, slots);
        let ev = encrypt_values(&v, keys, params, 900 + i).unwrap();
        let ew = encrypt_values(&w, keys, params, 940 + i).unwrap();
        let dv = decrypt_values(&ev, sk, params).unwrap();
        for (x, y) in dv.iter().zip(&v) {
            worst_rt = worst_rt.max((x - y).abs());
        }
        let sum = decrypt_values(&he_add(&ev, &ew, params).unwrap(), sk, params)
            .unwrap();
        for ((s, x), y) in sum.iter().zip(&v).zip(&w) {
            worst_add = worst_add.max((s - (x + y)).abs());
        }
    }
    out.push(bounded("ckks/roundtrip-bound", worst_rt, EPS0));
    out.push(bounded("ckks/add-homomorphism", worst_add, 2.0 * EPS0));

    // Multiplication and scale discipline.
    let mut worst_mul: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for i in 0..20u64 {
        let v = rand_unit(&mut rng, slots);
        let w = rand_unit(&mut rng, slots);
        let ev = encrypt_values(&v, keys, params, 1900 + i).unwrap();
        let ew = encrypt_values(&w, keys, params, 1940 + i).unwrap();
        let prod = he_mul(&ev, &ew, keys, params).unwrap();
        worst_scale = worst_scale.max((prod.scale / params.scale - 1.0).abs());
        let got = decrypt_values(&prod, sk, params).unwrap();
        for ((g, x), y) in got.iter().zip(&v).zip(&w) {
            worst_mul = worst_mul.max((g - x * y).abs());
        }
        let pt = encode(&w, prod.scale, prod.level, params).unwrap();
        let pp = mul_plain(&prod, &pt, params).unwrap();
        worst_scale = worst_scale.max((pp.scale / params.scale - 1.0).abs());
    }
    out.push(bounded("ckks/mul-homomorphism", worst_mul, EPS1));
    out.push(bounded("ckks/scale-discipline", worst_scale, 1.0));

    // A product chain of full depth, then one multiplication too many.
    let depth = params.max_level;
    let mut want = vec![1.0; slots];
    let mut acc = encrypt_values(&want, keys, params, 3000).unwrap();
    for i in 0..depth as u64 {
        let v = rand_unit(&mut rng, slots);
        let ev = encrypt_values(&v, keys, params, 3100 + i).unwrap();
        acc = he_mul(&acc, &ev, keys, params).unwrap();
        for (t, x) in want.iter_mut().zip(&v) {
            *t *= x;
        }
    }
    let got = decrypt_values(&acc, sk, params).unwrap();
    let mut worst_chain: f64 = 0.0;
    for (g, t) in got.iter().zip(&want) {
        worst_chain = worst_chain.max((g - t).abs());
    }
    out.push(bounded(
        "ckks/depth-chain",
        worst_chain,
        depth as f64 * EPS1,
    ));
    let extra = encrypt_values(&rand_unit(&mut rng, slots), keys, params, 3999)
        .unwrap();
    let exhausted = matches!(
        he_mul(&acc, &extra, keys, params),
        Err(CkksError::LevelExhausted { .. })
    );
    out.push(check(
        "ckks/level-exhaustion-raises",
        exhausted,
        format!("multiplication at level 0 after a depth-{depth} chain"),
    ));

    // Rotation: exact cyclic slot permutation for power-of-two steps.
    let v = rand_unit(&mut rng, slots);
    let ev = encrypt_values(&v, keys, params, 4000).unwrap();
    let mut worst_rot: f64 = 0.0;
    let mut step = 1;
    while step <= slots / 2 {
        let got =
            decrypt_values(&rotate(&ev, step, keys, params).unwrap(), sk, params)
                .unwrap();
        for (j, g) in got.iter().enumerate() {
            worst_rot = worst_rot.max((g - v[(j + step) % slots]).abs());
        }
        step *= 2;
    }
    out.push(bounded("ckks/rotation-cycles", worst_rot, EPS0));

    // Refresh restores the top level without moving the value.
    let mut refresher = RefreshProvider::test_oracle(
        params.clone(),
        sk_gen(params, derive_seed(seed, b"verify-sk")),
        keys.clone(),
        derive_seed(seed, b"verify-refresh"),
    );
    let mut worst_ref: f64 = 0.0;
    let mut levels_ok = true;
    for i in 0..10u64 {
        let v = rand_unit(&mut rng, slots);
        let w = rand_unit(&mut rng, slots);
        let ev = encrypt_values(&v, keys, params, 5000 + i).unwrap();
        let ew = encrypt_values(&w, keys, params, 5100 + i).unwrap();
        let low = he_mul(&ev, &ew, keys, params).unwrap();
        let fresh = refresher.refresh(&low, params).unwrap();
        levels_ok &= fresh.level == params.max_level;
        let before = decrypt_values(&low, sk, params).unwrap();
        let after = decrypt_values(&fresh, sk, params).unwrap();
        for (b, a) in before.iter().zip(&after) {
            worst_ref = worst_ref.max((b - a).abs());
        }
    }
    let mut res = bounded("ckks/refresh-transparency", worst_ref, 2.0 * EPS0);
    if !levels_ok {
        res.passed = false;
        res.detail.push_str("; refresh did not restore max level");
    }
    out.push(res);

    // Parameter invariants hold for the profile itself.
    let own = chain_invariants(
        params.ring_dim,
        &params.modulus_chain,
        params.ks_prime,
        params.scale,
    );
    let violated: Vec<&str> = own
        .iter()
        .filter(|(_, v)| v.is_some())
        .map(|(n, _)| *n)
        .collect();
    out.push(check(
        "ckks/params-invariants-hold",
        violated.is_empty(),
        if violated.is_empty() {
            format!("{} invariants verified", own.len())
        } else {
            format!("violated: {}", violated.join(", "))
        },
    ));

    // The corrupted fixture is rejected, naming its violations.
    let (rd, chain, ks, scale) = corrupted_chain_fixture();
    let report = chain_invariants(rd, &chain, ks, scale);
    let named: Vec<String> = report
        .iter()
        .filter_map(|(n, v)| v.as_ref().map(|d| format!("{n} ({d})")))
        .collect();
    let rejected = CkksParams::new(rd, chain, ks, scale, 12).is_err();
    out.push(check(
        "ckks/corrupt-chain-rejected",
        rejected && !named.is_empty(),
        format!("constructor rejects; violated: {}", named.join("; ")),
    ));
    out
}

fn tensor_checks(profile: Profile, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let params_probe = CkksParams::profile(profile);
    let slots = params_probe.slots();
    let mu = 4.min(slots / 4).max(2);
    let layout = PackLayout::new(mu, slots).unwrap();
    let mut steps: Vec<usize> = Vec::new();
    for count in 1..=mu.max(layout.rows()) {
        steps.extend(rot_sum_steps(mu, count, slots));
        steps.extend(rot_sum_steps(1, count, slots));
    }
    steps.extend(rot_sum_steps(slots - 1, mu, slots));
    steps.extend(rot_sum_steps(slots - mu, layout.rows(), slots));
    let r = rig(profile, seed.wrapping_add(1), &steps);
    let (params, sk, keys) = (&r.params, &r.sk, &r.keys);
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"tensor"));

    // Pack/unpack bijection, plain and through the cipher.
    let mut exact = true;
    let mut worst_pack: f64 = 0.0;
    for i in 0..10u64 {
        let rows = rng.gen_range(1..=mu);
        let cols = rng.gen_range(1..=mu);
        let w: Vec<Vec<f64>> =
            (0..rows).map(|_| rand_unit(&mut rng, cols)).collect();
        let pm = PackedMatrix::from_dense(&w, layout, false).unwrap();
        exact &= pm.to_dense() == w;
        let em = encrypt_matrix(&pm, keys, params, 6000 + i).unwrap();
        let back = decrypt_matrix(&em, sk, params).unwrap().to_dense();
        for (br, wr) in back.iter().zip(&w) {
            for (b, x) in br.iter().zip(wr) {
                worst_pack = worst_pack.max((b - x).abs());
            }
        }
    }
    let mut res = bounded("tensor/pack-bijection", worst_pack, EPS0);
    if !exact {
        res.passed = false;
        res.detail.push_str("; plaintext pack/unpack not exact");
    }
    out.push(res);

    // Encrypted matvec against the plaintext product.
    let mut worst_mv: f64 = 0.0;
    for i in 0..20u64 {
        let rows = rng.gen_range(1..=mu);
        let cols = rng.gen_range(1..=mu);
        let w: Vec<Vec<f64>> =
            (0..rows).map(|_| rand_unit(&mut rng, cols)).collect();
        let x = rand_unit(&mut rng, cols);
        let pm = PackedMatrix::from_dense(&w, layout, true).unwrap();
        let px =
            PackedVector::from_values(&x, layout, Replication::ColReplicated)
                .unwrap();
        let em = encrypt_matrix(&pm, keys, params, 7000 + i).unwrap();
        let ex = encrypt_vector(&px, keys, params, 7100 + i).unwrap();
        let got = decrypt_vector(
            &matvec_a(&em, &ex, keys, params).unwrap(),
            sk,
            params,
        )
        .unwrap()
        .values();
        let want = matvec_plain(&w, &x);
        for (g, t) in got.iter().zip(&want) {
            worst_mv = worst_mv.max((g - t).abs());
        }
    }
    out.push(bounded("tensor/matvec-bound", worst_mv, mu as f64 * EPS1));

    // Encrypted Chebyshev evaluation: value and level arithmetic.
    let act = match profile {
        Profile::Toy => PolyAct::silu_shallow(),
        _ => PolyAct::silu_default(),
    };
    let fit = &act.fit;
    let xs: Vec<f64> = (0..slots)
        .map(|j| {
            fit.lo + (fit.hi - fit.lo) * j as f64 / (slots - 1).max(1) as f64
        })
        .collect();
    let ct = encrypt_values(&xs, keys, params, 8000).unwrap();
    let evald = fit.eval_ct(&ct, keys, params).unwrap();
    let levels_exact =
        ct.level - evald.level == fit.levels_required();
    let got = decrypt_values(&evald, sk, params).unwrap();
    let mut worst_vs_poly: f64 = 0.0;
    let mut declared: f64 = 0.0;
    for (g, x) in got.iter().zip(&xs) {
        worst_vs_poly = worst_vs_poly.max((g - fit.eval_mono(*x)).abs());
        declared = declared.max((fit.eval_mono(*x) - silu(*x)).abs());
    }
    let d = fit.levels_required() as f64;
    out.push(bounded(
        "tensor/cheb-encrypted-eval",
        worst_vs_poly,
        d * EPS1,
    ));
    out.push(check(
        "tensor/cheb-level-arithmetic",
        levels_exact,
        format!(
            "consumed {} levels, ladder predicts {}",
            ct.level - evald.level,
            fit.levels_required()
        ),
    ));
    let mut worst_vs_true: f64 = 0.0;
    for (g, x) in got.iter().zip(&xs) {
        worst_vs_true = worst_vs_true.max((g - silu(*x)).abs());
    }
    out.push(bounded(
        "tensor/cheb-vs-function",
        worst_vs_true,
        declared + d * EPS1,
    ));
    out
}

/// Architecture small enough to pack at every built-in profile.
fn verify_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec { in_dim: 4, out_dim: 3, activation: Activation::Silu },
        LayerSpec { in_dim: 3, out_dim: 2, activation: Activation::Silu },
    ]
}

fn nn_checks(profile: Profile, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let specs = verify_specs();
    let params = Arc::new(CkksParams::profile(profile));
    let layout = layout_for(&specs, params.slots()).unwrap();
    let steps: Vec<usize> =
        rotation_steps_for(&specs, layout).into_iter().collect();
    let r = rig(profile, seed.wrapping_add(2), &steps);
    let (params, sk, keys) = (&r.params, &r.sk, &r.keys);
    let mut refresher = RefreshProvider::test_oracle(
        params.clone(),
        sk_gen(params, derive_seed(seed.wrapping_add(2), b"verify-sk")),
        keys.clone(),
        derive_seed(seed, b"nn-refresh"),
    );
    let act = match profile {
        Profile::Toy => PolyAct::silu_shallow(),
        _ => PolyAct::silu_default(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"nn"));

    // Encrypted forward pass against its plaintext surrogate mirror.
    let mut worst_fwd: f64 = 0.0;
    for i in 0..5u64 {
        let m = init_model(&specs, 9000 + i).unwrap();
        let x = rand_unit(&mut rng, 4);
        let em = encrypt_model(&m, layout, keys, params, 9100 + i).unwrap();
        let ex = encrypt_input(&x, layout, keys, params, 9200 + i).unwrap();
        let trace =
            forward_enc(&em, &ex, &act, keys, params, &mut refresher).unwrap();
        let got = decrypt_vector(trace.output(), sk, params).unwrap().values();
        let want = forward_plain(&m, &x, Some(&act)).unwrap();
        for (g, t) in got.iter().zip(&want) {
            worst_fwd = worst_fwd.max((g - t).abs());
        }
    }
    out.push(bounded("nn/forward-congruence", worst_fwd, 1e-2));

    // Analytic and surrogate gradients against central differences.
    let m = init_model(&specs, 9500).unwrap();
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|_| (rand_unit(&mut rng, 4), vec![0.0, 1.0]))
        .collect();
    let mut worst_fd: f64 = 0.0;
    for poly in [None, Some(&act)] {
        let g = loss_and_grads_plain(&m, &batch, poly).unwrap();
        let h = 1e-5;
        for l in 0..specs.len() {
            for i in 0..specs[l].in_dim {
                let mut hi = m.clone();
                hi.weights[l][i][0] += h;
                let mut lo = m.clone();
                lo.weights[l][i][0] -= h;
                let fd = (loss_and_grads_plain(&hi, &batch, poly).unwrap().loss
                    - loss_and_grads_plain(&lo, &batch, poly).unwrap().loss)
                    / (2.0 * h);
                let an = g.dw[l][i][0];
                let rel = (fd - an).abs() / an.abs().max(1e-6);
                worst_fd = worst_fd.max(rel);
            }
        }
    }
    out.push(bounded("nn/gradient-finite-difference", worst_fd, 1e-4));

    // One encrypted SGD round against the plaintext surrogate round.
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 2,
        epochs_per_round: 1.0,
        rng_seed: 42,
    };
    let mut plain_m = init_model(&specs, 9700).unwrap();
    let mut enc_m =
        encrypt_model(&plain_m, layout, keys, params, 9701).unwrap();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
        .map(|i| {
            (rand_unit(&mut rng, 4), crate::data::one_hot(i % 2, 2))
        })
        .collect();
    let enc_pairs: Vec<_> = pairs
        .iter()
        .enumerate()
        .map(|(i, (x, t))| {
            let ex =
                encrypt_input(x, layout, keys, params, 9800 + i as u64).unwrap();
            let et = crate::nn::enc::encrypt_target(
                t,
                specs.len(),
                layout,
                keys,
                params,
                9900 + i as u64,
            )
            .unwrap();
            (ex, et)
        })
        .collect();
    train_round_plain(&mut plain_m, &pairs, &cfg, 1, Some(&act)).unwrap();
    train_round_enc(
        &mut enc_m,
        &enc_pairs,
        &cfg,
        1,
        &act,
        keys,
        params,
        &mut refresher,
    )
    .unwrap();
    let dec = decrypt_model(&enc_m, sk, params).unwrap();
    let mut worst_step: f64 = 0.0;
    for (a, b) in dec
        .weights
        .iter()
        .flatten()
        .flatten()
        .chain(dec.biases.iter().flatten())
        .zip(
            plain_m
                .weights
                .iter()
                .flatten()
                .flatten()
                .chain(plain_m.biases.iter().flatten()),
        )
    {
        worst_step = worst_step.max((a - b).abs());
    }
    out.push(bounded("nn/training-step-congruence", worst_step, 1e-2));

    // Raw scores out of the last layer: affine, no softmax anywhere.
    let id_specs = vec![LayerSpec {
        in_dim: 3,
        out_dim: 2,
        activation: Activation::Identity,
    }];
    let lin = init_model(&id_specs, 9999).unwrap();
    let mut affine = true;
    for _ in 0..10 {
        let x = rand_unit(&mut rng, 3);
        let y = rand_unit(&mut rng, 3);
        let fx = forward_plain(&lin, &x, None).unwrap();
        let fy = forward_plain(&lin, &y, None).unwrap();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let fs = forward_plain(&lin, &sum, None).unwrap();
        let f0 = forward_plain(&lin, &[0.0; 3], None).unwrap();
        for i in 0..2 {
            affine &= (fx[i] + fy[i] - f0[i] - fs[i]).abs() < 1e-9;
        }
    }
    let no_softmax = [Activation::Silu, Activation::Identity]
        .iter()
        .all(|a| a.name() != "softmax");
    out.push(check(
        "nn/raw-score-output",
        affine && no_softmax,
        "output layer is affine in its input; activation set has no softmax"
            .into(),
    ));
    out
}

fn fl_checks(profile: Profile, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let specs = verify_specs();

    // Ciphertext aggregation against the plaintext mean.
    let params = Arc::new(CkksParams::profile(profile));
    let layout = layout_for(&specs, params.slots()).unwrap();
    let r = rig(profile, seed.wrapping_add(3), &[]);
    let (params, sk, keys) = (&r.params, &r.sk, &r.keys);
    let mut refresher = RefreshProvider::test_oracle(
        params.clone(),
        sk_gen(params, derive_seed(seed.wrapping_add(3), b"verify-sk")),
        keys.clone(),
        derive_seed(seed, b"fl-refresh"),
    );
    let models: Vec<_> =
        (0..3).map(|i| init_model(&specs, 11000 + i).unwrap()).collect();
    let enc: Vec<_> = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            encrypt_model(m, layout, keys, params, 11100 + i as u64).unwrap()
        })
        .collect();
    let agg = aggregate_enc(
        &enc.iter().collect::<Vec<_>>(),
        params,
        &mut refresher,
    )
    .unwrap();
    let dec = decrypt_model(&agg, sk, params).unwrap();
    let want = aggregate_plain(&models.iter().collect::<Vec<_>>()).unwrap();
    let mut worst_agg: f64 = 0.0;
    for (a, b) in dec
        .weights
        .iter()
        .flatten()
        .flatten()
        .zip(want.weights.iter().flatten().flatten())
    {
        worst_agg = worst_agg.max((a - b).abs());
    }
    out.push(bounded("fl/aggregate-oracle", worst_agg, 3.0 * EPS0 + EPS1));

    // A tiny full run: privacy scan, conservation, determinism.
    let run = |mode: Mode| {
        let data: Vec<Sample> = synth_run_samples(seed);
        let shards: Vec<VuShard> = vec![
            split_shard(data[..8].to_vec(), 0.5),
            split_shard(data[8..16].to_vec(), 0.5),
        ];
        let cfg = SystemConfig {
            mode,
            n_rsus: 2,
            specs: verify_specs(),
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
            profile: Some(profile),
            seed: derive_seed(seed, b"fl-run"),
            t_max: 2,
            convergence: ConvergenceRule { window: 5, min_delta_pp: 0.0 },
        };
        let mut sys =
            pre_learning(cfg, &[0.5, 0.5], shards, data[16..].to_vec())
                .unwrap();
        sys.run_protocol()
    };

    let a = run(Mode::EncFl);
    let b = run(Mode::EncFl);
    out.push(check(
        "fl/privacy-scan",
        a.aborted.is_none() && a.violations.is_empty(),
        match (&a.aborted, a.violations.len()) {
            (None, 0) => "no plaintext payload reached the server".into(),
            (Some(why), _) => format!("run aborted: {why}"),
            (None, n) => format!("{n} violations"),
        },
    ));
    out.push(check(
        "fl/data-conservation",
        a.records.len() == 2,
        format!("{} of 2 rounds completed", a.records.len()),
    ));
    let lines_a: Vec<String> = a.records.iter().map(round_log_line).collect();
    let lines_b: Vec<String> = b.records.iter().map(round_log_line).collect();
    out.push(check(
        "fl/run-determinism",
        lines_a == lines_b && !lines_a.is_empty(),
        format!("{} identical round log lines", lines_a.len()),
    ));

    let plain = run(Mode::NEncFl);
    let mut worst_base: f64 = 0.0;
    for (x, y) in a
        .final_model
        .weights
        .iter()
        .flatten()
        .flatten()
        .zip(plain.final_model.weights.iter().flatten().flatten())
    {
        worst_base = worst_base.max((x - y).abs());
    }
    out.push(bounded("fl/baseline-equivalence", worst_base, 0.1));
    out
}

/// Separable two-class samples for the tiny protocol runs.
fn synth_run_samples(seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"fl-data"));
    (0..24)
        .map(|i| {
            let label = i % 2;
            let features = (0..4)
                .map(|d| {
                    let c = if d == label { 0.9 } else { 0.1 };
                    c + rng.gen_range(-0.05..0.05)
                })
                .collect();
            Sample { features, label }
        })
        .collect()
}

fn split_shard(samples: Vec<Sample>, p: f64) -> VuShard {
    let k = (p * samples.len() as f64).round() as usize;
    let mut retained = samples;
    let offloaded = retained.split_off(retained.len() - k);
    VuShard { retained, offloaded }
}

fn data_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let spec = SynthSpec { feature_count: 6, separation: 2.0, noise: 1.0 };
    let counts = [40, 50, 30, 45, 35, 40];
    let samples = synth_generate(&spec, &counts, derive_seed(seed, b"data"));

    // Rebalance hits its targets exactly.
    let targets = [30usize; CLASS_COUNT];
    let balanced = rebalance(&samples, &targets, 1).unwrap();
    let mut got = [0usize; CLASS_COUNT];
    for s in &balanced {
        got[s.label] += 1;
    }
    out.push(check(
        "data/rebalance-exact",
        got == targets,
        format!("per-class counts {got:?}"),
    ));

    // Scaling bounds and inverse recovery.
    let scaling = Scaling::fit(&samples).unwrap();
    let mut in_bounds = true;
    let mut worst_inv: f64 = 0.0;
    for s in &samples {
        let scaled = scaling.apply(&s.features);
        in_bounds &= scaled.iter().all(|&v| (0.0..=1.0).contains(&v));
        for (r, o) in scaling.invert(&scaled).iter().zip(&s.features) {
            worst_inv = worst_inv.max((r - o).abs());
        }
    }
    let mut res = bounded("data/scaling-bounds", worst_inv, 1e-9);
    if !in_bounds {
        res.passed = false;
        res.detail.push_str("; scaled features left [0,1]");
    }
    out.push(res);

    // Shards keep the global class mix.
    let shards = shard_for_vus(&samples, &[0.2, 0.2, 0.2], 2).unwrap();
    let total = samples.len() as f64;
    let mut worst_dev: f64 = 0.0;
    let mut min_shard = usize::MAX;
    for shard in &shards {
        let mut counts = [0usize; CLASS_COUNT];
        let all: Vec<&Sample> =
            shard.retained.iter().chain(&shard.offloaded).collect();
        for s in &all {
            counts[s.label] += 1;
        }
        min_shard = min_shard.min(all.len());
        for c in 0..CLASS_COUNT {
            let global = samples.iter().filter(|s| s.label == c).count() as f64
                / total;
            let local = counts[c] as f64 / all.len() as f64;
            worst_dev = worst_dev.max((local - global).abs());
        }
    }
    out.push(bounded(
        "data/shard-proportions",
        worst_dev,
        1.0 / min_shard as f64 + 1e-9,
    ));

    // Identical seeds give identical membership.
    let again = shard_for_vus(&samples, &[0.2, 0.2, 0.2], 2).unwrap();
    let same = shards.iter().zip(&again).all(|(a, b)| {
        a.retained == b.retained && a.offloaded == b.offloaded
    });
    out.push(check(
        "data/split-determinism",
        same,
        "same seed reproduces shard membership".into(),
    ));
    out
}

fn metrics_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    // The worked two-class matrices, exactly.
    let mut cm = ConfusionMatrix::new(2);
    cm.counts = vec![vec![1, 1], vec![1, 1]];
    let s = summarize(&cm).unwrap();
    let uniform_ok = s.paper_accuracy == 0.5
        && s.micro_accuracy == 0.5
        && s.macro_precision == 0.5
        && s.macro_recall == 0.5;
    let mut cm2 = ConfusionMatrix::new(2);
    cm2.counts = vec![vec![2, 0], vec![1, 1]];
    let s2 = summarize(&cm2).unwrap();
    let skewed_ok = (s2.macro_precision - 5.0 / 6.0).abs() < 1e-15
        && (s2.macro_recall - 0.75).abs() < 1e-15
        && s2.paper_accuracy == 0.75;
    out.push(check(
        "metrics/worked-examples",
        uniform_ok && skewed_ok,
        "uniform and skewed two-class matrices match hand values".into(),
    ));

    // Range and permutation invariance on a random matrix.
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"metrics"));
    let mut cm = ConfusionMatrix::new(CLASS_COUNT);
    for _ in 0..200 {
        let t = rng.gen_range(0..CLASS_COUNT);
        let p = rng.gen_range(0..CLASS_COUNT);
        cm.accumulate(t, p).unwrap();
    }
    let s = summarize(&cm).unwrap();
    let in_range = [
        s.paper_accuracy,
        s.micro_accuracy,
        s.macro_precision,
        s.macro_recall,
    ]
    .iter()
    .all(|v| (0.0..=1.0).contains(v));
    let perm: Vec<usize> = (0..CLASS_COUNT).rev().collect();
    let mut pm = ConfusionMatrix::new(CLASS_COUNT);
    for t in 0..CLASS_COUNT {
        for p in 0..CLASS_COUNT {
            pm.counts[perm[t]][perm[p]] = cm.counts[t][p];
        }
    }
    let sp = summarize(&pm).unwrap();
    let perm_ok = (s.paper_accuracy - sp.paper_accuracy).abs() < 1e-12
        && (s.macro_precision - sp.macro_precision).abs() < 1e-12
        && (s.macro_recall - sp.macro_recall).abs() < 1e-12;
    out.push(check(
        "metrics/bounds-and-permutation",
        in_range && perm_ok,
        "all metrics in [0,1]; invariant under class relabeling".into(),
    ));

    // Accumulation order cannot matter.
    let pairs: Vec<(usize, usize)> = (0..100)
        .map(|_| {
            (rng.gen_range(0..CLASS_COUNT), rng.gen_range(0..CLASS_COUNT))
        })
        .collect();
    let mut fwd = ConfusionMatrix::new(CLASS_COUNT);
    let mut rev = ConfusionMatrix::new(CLASS_COUNT);
    for &(t, p) in &pairs {
        fwd.accumulate(t, p).unwrap();
    }
    for &(t, p) in pairs.iter().rev() {
        rev.accumulate(t, p).unwrap();
    }
    out.push(check(
        "metrics/accumulate-commutes",
        fwd.counts == rev.counts,
        "forward and reverse accumulation agree".into(),
    ));
    out
}

fn config_checks() -> Vec<CheckResult> {
    let text = r#"
mode = "encfl"
seed = 7
t_max = 10

[federation]
n_vus = 2
offload = [0.1, 0.3]

[cipher]
profile = "test"

[network]
hidden = [8]

[dataset]
source = "synthetic"
feature_count = 8
"#;
    let parsed = ExperimentConfig::from_toml(text).unwrap();
    let again = ExperimentConfig::from_toml(&parsed.to_toml());
    let ok = matches!(&again, Ok(c) if *c == parsed);
    vec![check(
        "config/round-trip-identity",
        ok,
        "parse, serialize, parse returns the identical config".into(),
    )]
}

/// The full named-invariant suite at one profile.
pub fn run_all(profile: Profile, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(cipher_checks(profile, seed));
    out.extend(tensor_checks(profile, seed));
    out.extend(nn_checks(profile, seed));
    out.extend(fl_checks(profile, seed));
    out.extend(data_checks(seed));
    out.extend(metrics_checks(seed));
    out.extend(config_checks());
    out
}

/// Render one check as a report line.
pub fn report_line(c: &CheckResult) -> String {
    format!(
        "{} {} ({})",
        if c.passed { "PASS" } else { "FAIL" },
        c.name,
        c.detail
    )
}
