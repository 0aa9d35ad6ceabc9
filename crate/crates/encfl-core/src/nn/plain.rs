//! Plaintext MLP with SGD, the reference the encrypted trainer is
//! measured against.
//!
//! Forward pass for layer l on a row vector: y_l = a_{l-1}·W_l + b_l,
//! a_l = act(y_l), with W_l stored in-dim × out-dim. The loss over a
//! batch B is mean squared error against one-hot targets, halved so
//! the output delta has no stray factor of two:
//!
//!   L = (1/|B|) Σ_B ‖a_L − t‖² / 2
//!
//! Backpropagation follows from the chain rule:
//!
//!   δ_L = (a_L − t) ⊙ act'(y_L)
//!   δ_l = (δ_{l+1} · W_{l+1}ᵀ) ⊙ act'(y_l)
//!   ∂L/∂W_l = a_{l-1}ᵀ · δ_l      ∂L/∂b_l = δ_l
//!
//! The activation is either analytic SiLU, x·sigmoid(x), or a fixed
//! Chebyshev surrogate of it. Whichever form the forward pass uses,
//! the backward pass differentiates that same form: mixing the
//! analytic derivative with a surrogate forward would make gradients
//! inconsistent with the loss actually being descended, and the
//! finite-difference oracle below would catch it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::NnError;
use crate::ckks::refresh::derive_seed;
use crate::tensor::ChebFit;

/// Slot-wise nonlinearity of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Identity => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "silu" => Some(Activation::Silu),
            "none" | "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One layer's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// A SiLU surrogate bundled with its derivative, so forward and
/// backward always come from the same fit.
#[derive(Clone, Debug)]
pub struct PolyAct {
    pub fit: ChebFit,
    pub deriv: ChebFit,
}

impl PolyAct {
    pub fn new(fit: ChebFit) -> PolyAct {
        let deriv = fit.derivative();
        PolyAct { fit, deriv }
    }

    /// The working surrogate: degree 15 on [-8, 8], under 1e-2 away
    /// from SiLU everywhere on the interval.
    pub fn silu_default() -> PolyAct {
        PolyAct::new(ChebFit::fit(silu, -8.0, 8.0, 15).expect("static fit"))
    }

    /// A shallow surrogate for small parameter sets that cannot
    /// afford the depth of the degree-15 fit.
    pub fn silu_shallow() -> PolyAct {
        PolyAct::new(ChebFit::fit(silu, -8.0, 8.0, 7).expect("static fit"))
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn apply_act(a: Activation, y: f64, poly: Option<&PolyAct>) -> f64 {
    match (a, poly) {
        (Activation::Identity, _) => y,
        (Activation::Silu, None) => silu(y),
        (Activation::Silu, Some(p)) => p.fit.eval_mono(y),
    }
}

fn apply_act_deriv(a: Activation, y: f64, poly: Option<&PolyAct>) -> f64 {
    match (a, poly) {
        (Activation::Identity, _) => 1.0,
        (Activation::Silu, None) => silu_deriv(y),
        (Activation::Silu, Some(p)) => p.deriv.eval_mono(y),
    }
}

/// Weights and biases for a chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainModel {
    pub specs: Vec<LayerSpec>,
    /// weights[l][i][j]: in-dim × out-dim, row-major.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

/// SGD hyperparameters shared by the plaintext and encrypted trainers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the data per round. Fractions are allowed: 0.5
    /// executes half an epoch's worth of batches.
    pub epochs_per_round: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            epochs_per_round: 1.0,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NnError::Hyper(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::Hyper("batch size must be at least 1".into()));
        }
        if !(self.epochs_per_round.is_finite() && self.epochs_per_round >= 0.0) {
            return Err(NnError::Hyper(format!(
                "epochs per round {} must be finite and non-negative",
                self.epochs_per_round
            )));
        }
        Ok(())
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<(), NnError> {
    if specs.is_empty() {
        return Err(NnError::Empty);
    }
    for (l, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NnError::Shape { layer: l, what: "dimension", want: 1, got: 0 });
        }
    }
    for l in 1..specs.len() {
        if specs[l].in_dim != specs[l - 1].out_dim {
            return Err(NnError::Shape {
                layer: l,
                what: "in_dim",
                want: specs[l - 1].out_dim,
                got: specs[l].in_dim,
            });
        }
    }
    Ok(())
}

/// Xavier-uniform weights, ±sqrt(6/(in+out)), zero biases.
pub fn init_model(specs: &[LayerSpec], seed: u64) -> Result<PlainModel, NnError> {
    check_chain(specs)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for s in specs {
        let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
        let w: Vec<Vec<f64>> = (0..s.in_dim)
            .map(|_| (0..s.out_dim).map(|_| rng.gen_range(-bound..bound)).collect())
            .collect();
        weights.push(w);
        biases.push(vec![0.0; s.out_dim]);
    }
    Ok(PlainModel { specs: specs.to_vec(), weights, biases })
}

impl PlainModel {
    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::Shape {
                layer: 0,
                what: "input length",
                want: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Pre- and post-activation values of every layer for one input.
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

pub fn forward_trace(
    m: &PlainModel,
    x: &[f64],
    poly: Option<&PolyAct>,
) -> Result<Trace, NnError> {
    m.check_input(x)?;
    let mut pre = Vec::with_capacity(m.specs.len());
    let mut post = Vec::with_capacity(m.specs.len());
    let mut a = x.to_vec();
    for (l, s) in m.specs.iter().enumerate() {
        let mut y = m.biases[l].clone();
        for (i, &ai) in a.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += ai * m.weights[l][i][j];
            }
        }
        a = y.iter().map(|&v| apply_act(s.activation, v, poly)).collect();
        pre.push(y);
        post.push(a.clone());
    }
    Ok(Trace { pre, post })
}

pub fn forward_plain(
    m: &PlainModel,
    x: &[f64],
    poly: Option<&PolyAct>,
) -> Result<Vec<f64>, NnError> {
    Ok(forward_trace(m, x, poly)?.post.pop().unwrap())
}

/// Index of the largest score, lowest index winning ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Parameter gradients averaged over a batch, plus the batch loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub dw: Vec<Vec<Vec<f64>>>,
    pub db: Vec<Vec<f64>>,
    pub loss: f64,
}

pub fn loss_and_grads_plain(
    m: &PlainModel,
    batch: &[(Vec<f64>, Vec<f64>)],
    poly: Option<&PolyAct>,
) -> Result<Gradients, NnError> {
    if batch.is_empty() {
        return Err(NnError::Hyper("empty batch".into()));
    }
    let last = m.specs.len() - 1;
    let mut dw: Vec<Vec<Vec<f64>>> = m
        .specs
        .iter()
        .map(|s| vec![vec![0.0; s.out_dim]; s.in_dim])
        .collect();
    let mut db: Vec<Vec<f64>> = m.specs.iter().map(|s| vec![0.0; s.out_dim]).collect();
    let mut loss = 0.0;

    for (x, t) in batch {
        if t.len() != m.output_dim() {
            return Err(NnError::Shape {
                layer: last,
                what: "target length",
                want: m.output_dim(),
                got: t.len(),
            });
        }
        let trace = forward_trace(m, x, poly)?;
        let out = &trace.post[last];
        loss += out
            .iter()
            .zip(t)
            .map(|(o, tv)| (o - tv) * (o - tv))
            .sum::<f64>()
            / 2.0;

        let mut delta: Vec<f64> = out
            .iter()
            .zip(t)
            .zip(&trace.pre[last])
            .map(|((o, tv), &y)| (o - tv) * apply_act_deriv(m.specs[last].activation, y, poly))
            .collect();

        for l in (0..m.specs.len()).rev() {
            let a_in: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
            for (i, &ai) in a_in.iter().enumerate() {
                for (j, &dj) in delta.iter().enumerate() {
                    dw[l][i][j] += ai * dj;
                }
            }
            for (j, &dj) in delta.iter().enumerate() {
                db[l][j] += dj;
            }
            if l > 0 {
                delta = (0..m.specs[l].in_dim)
                    .map(|i| {
                        let back: f64 =
                            delta.iter().enumerate().map(|(j, &dj)| m.weights[l][i][j] * dj).sum();
                        back * apply_act_deriv(
                            m.specs[l - 1].activation,
                            trace.pre[l - 1][i],
                            poly,
                        )
                    })
                    .collect();
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for layer in dw.iter_mut() {
        for row in layer.iter_mut() {
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    for layer in db.iter_mut() {
        for v in layer.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Gradients { dw, db, loss: loss * inv })
}

pub fn sgd_update_plain(m: &mut PlainModel, g: &Gradients, learning_rate: f64) {
    for (l, layer) in m.weights.iter_mut().enumerate() {
        for (i, row) in layer.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                *w -= learning_rate * g.dw[l][i][j];
            }
        }
    }
    for (l, layer) in m.biases.iter_mut().enumerate() {
        for (j, b) in layer.iter_mut().enumerate() {
            *b -= learning_rate * g.db[l][j];
        }
    }
}

/// The batch schedule for one round: a seeded shuffle chunked by batch
/// size, repeated (or cut short) to honor fractional epochs. Both
/// trainers consume the same plan, so the encrypted run and its
/// plaintext mirror visit identical samples in identical order.
pub fn batch_plan(n: usize, cfg: &TrainConfig, round: u64) -> Vec<Vec<usize>> {
    if n == 0 || cfg.epochs_per_round == 0.0 {
        return Vec::new();
    }
    let steps = ((cfg.epochs_per_round * n as f64) / cfg.batch_size as f64).ceil().max(1.0)
        as usize;
    let mut rng =
        ChaCha20Rng::seed_from_u64(derive_seed(cfg.rng_seed, &round.to_le_bytes()));
    let mut plan = Vec::with_capacity(steps);
    'outer: loop {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        for chunk in perm.chunks(cfg.batch_size) {
            plan.push(chunk.to_vec());
            if plan.len() == steps {
                break 'outer;
            }
        }
    }
    plan
}

/// One round of mini-batch SGD. Returns the mean batch loss.
pub fn train_round_plain(
    m: &mut PlainModel,
    data: &[(Vec<f64>, Vec<f64>)],
    cfg: &TrainConfig,
    round: u64,
    poly: Option<&PolyAct>,
) -> Result<f64, NnError> {
    cfg.validate()?;
    let plan = batch_plan(data.len(), cfg, round);
    if plan.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for batch_idx in &plan {
        let batch: Vec<(Vec<f64>, Vec<f64>)> =
            batch_idx.iter().map(|&i| data[i].clone()).collect();
        let g = loss_and_grads_plain(m, &batch, poly)?;
        sgd_update_plain(m, &g, cfg.learning_rate);
        total += g.loss;
    }
    Ok(total / plan.len() as f64)
}
