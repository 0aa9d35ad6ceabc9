//! Experiment configuration: one TOML file pins an entire run.
//!
//! Everything that influences results lives in the file: mode, party
//! counts, offload fractions, cipher profile, architecture, training
//! hyperparameters, dataset source, seeds, round budget and the
//! convergence rule. The only thing allowed in from outside is an
//! output-directory override, so a run is reproducible from the config
//! artifact alone.
//!
//! Validation is exhaustive: `validate` returns every problem it can
//! find, not just the first, and checks referential completeness (the
//! files a config points at must exist when it is parsed).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckks::params::{CkksParams, Profile};
use crate::data::{SchemaConfig, CLASS_COUNT};
use crate::fl::{ConvergenceRule, Mode, SystemConfig};
use crate::nn::enc::layout_for;
use crate::nn::{Activation, LayerSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Round budget; zero runs no rounds and keeps the initial model.
    pub t_max: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub federation: FederationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cipher: Option<CipherConfig>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Number of vehicle clients N.
    pub n_vus: usize,
    /// Number of relay roadside units M; affects only traffic logs.
    #[serde(default = "default_n_rsus")]
    pub n_rsus: usize,
    /// Offload fraction p, one value for all VUs or one per VU.
    #[serde(default)]
    pub offload: Offload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offload {
    Uniform(f64),
    PerVu(Vec<f64>),
}

impl Default for Offload {
    fn default() -> Offload {
        Offload::Uniform(0.0)
    }
}

impl Offload {
    pub fn fractions(&self, n_vus: usize) -> Result<Vec<f64>, String> {
        match self {
            Offload::Uniform(p) => Ok(vec![*p; n_vus]),
            Offload::PerVu(v) if v.len() == n_vus => Ok(v.clone()),
            Offload::PerVu(v) => Err(format!(
                "federation.offload lists {} fractions for {} VUs",
                v.len(),
                n_vus
            )),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Offload::Uniform(p) => std::slice::from_ref(p),
            Offload::PerVu(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CipherConfig {
    pub profile: Profile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden layer widths; input width comes from the dataset and the
    /// output layer is one neuron per class.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> NetworkConfig {
        NetworkConfig { hidden: default_hidden() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs per round on each VU's retained share.
    #[serde(default = "default_epochs")]
    pub local_epochs: f64,
    /// Epochs per round on the server's offloaded share; fractional
    /// values bound the cost of the encrypted pass.
    #[serde(default = "default_epochs")]
    pub server_epochs: f64,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            local_epochs: default_epochs(),
            server_epochs: default_epochs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta_pp: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> ConvergenceConfig {
        ConvergenceConfig {
            window: default_window(),
            min_delta_pp: default_min_delta(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Seeded Gaussian-mixture data with the reference class counts
    /// divided by `scale_divisor`.
    Synthetic {
        #[serde(default = "default_divisor")]
        scale_divisor: usize,
        #[serde(default = "default_features")]
        feature_count: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// CSV file plus a schema mapping columns to features and labels.
    Csv {
        path: String,
        schema: String,
        #[serde(default = "default_rebalance")]
        rebalance: bool,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub modes: Vec<Mode>,
}

impl Default for CompareConfig {
    fn default() -> CompareConfig {
        CompareConfig { modes: Mode::all().to_vec() }
    }
}

fn default_output_dir() -> String {
    "out".into()
}
fn default_n_rsus() -> usize {
    1
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> f64 {
    1.0
}
fn default_window() -> usize {
    5
}
fn default_min_delta() -> f64 {
    0.1
}
fn default_divisor() -> usize {
    10
}
fn default_features() -> usize {
    32
}
fn default_separation() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    1.0
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_rebalance() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Parse a config file. Returns the config together with its base
    /// directory, against which relative paths inside it resolve.
    pub fn load(path: &Path) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(base_dir: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }

    pub fn fractions(&self) -> Result<Vec<f64>, String> {
        self.federation.offload.fractions(self.federation.n_vus)
    }

    /// Width of the input layer: the dataset's feature count.
    pub fn input_width(&self, base_dir: &Path) -> Result<usize, String> {
        match &self.dataset {
            DatasetConfig::Synthetic { feature_count, .. } => Ok(*feature_count),
            DatasetConfig::Csv { schema, .. } => {
                let path = Self::resolve(base_dir, schema);
                let schema = SchemaConfig::load(&path)
                    .map_err(|e| format!("schema {}: {e}", path.display()))?;
                Ok(schema.feature_columns.len())
            }
        }
    }

    /// Silu on every hidden layer, identity on the class scores.
    pub fn layer_specs(&self, input_width: usize) -> Vec<LayerSpec> {
        let mut dims = vec![input_width];
        dims.extend(&self.network.hidden);
        dims.push(CLASS_COUNT);
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Silu
                },
            })
            .collect()
    }

    /// Every problem in the config, or an empty list if it is sound.
    pub fn validate(&self, base_dir: &Path) -> Vec<String> {
        let mut errs = Vec::new();
        let fed = &self.federation;
        if fed.n_vus == 0 {
            errs.push("federation.n_vus must be at least 1".into());
        }
        if fed.n_rsus == 0 {
            errs.push("federation.n_rsus must be at least 1".into());
        }
        if let Offload::PerVu(v) = &fed.offload {
            if fed.n_vus != 0 && v.len() != fed.n_vus {
                errs.push(format!(
                    "federation.offload lists {} fractions for {} VUs",
                    v.len(),
                    fed.n_vus
                ));
            }
        }
        for &p in fed.offload.values() {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("offload fraction {p} outside [0, 1]"));
            }
        }
        if self.mode == Mode::Cfl && fed.offload.values().iter().any(|&p| p > 0.0) {
            errs.push(
                "cfl mode offloads nothing; set federation.offload to 0".into(),
            );
        }
        if self.mode == Mode::EncFl && self.cipher.is_none() {
            errs.push("encfl mode requires a [cipher] profile".into());
        }

        let tr = &self.training;
        if !(tr.learning_rate.is_finite() && tr.learning_rate > 0.0) {
            errs.push(format!(
                "training.learning_rate {} must be finite and positive",
                tr.learning_rate
            ));
        }
        if tr.batch_size == 0 {
            errs.push("training.batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("training.local_epochs", tr.local_epochs),
            ("training.server_epochs", tr.server_epochs),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} {v} must be finite and non-negative"));
            }
        }

        if self.convergence.window == 0 {
            errs.push("convergence.window must be at least 1".into());
        }
        if !(self.convergence.min_delta_pp.is_finite()
            && self.convergence.min_delta_pp >= 0.0)
        {
            errs.push(format!(
                "convergence.min_delta_pp {} must be finite and non-negative",
                self.convergence.min_delta_pp
            ));
        }

        if let Some(w) = self.network.hidden.iter().find(|&&w| w == 0) {
            errs.push(format!("network.hidden contains a zero-width layer {w}"));
        }

        match &self.dataset {
            DatasetConfig::Synthetic {
                scale_divisor,
                feature_count,
                separation,
                noise,
                train_fraction,
            } => {
                if *scale_divisor == 0 {
                    errs.push("dataset.scale_divisor must be at least 1".into());
                }
                if *feature_count == 0 {
                    errs.push("dataset.feature_count must be at least 1".into());
                }
                for (name, v) in [
                    ("dataset.separation", *separation),
                    ("dataset.noise", *noise),
                ] {
                    if !(v.is_finite() && v >= 0.0) {
                        errs.push(format!(
                            "{name} {v} must be finite and non-negative"
                        ));
                    }
                }
                check_fraction(&mut errs, *train_fraction);
            }
            DatasetConfig::Csv { path, schema, train_fraction, .. } => {
                let data_path = Self::resolve(base_dir, path);
                if !data_path.is_file() {
                    errs.push(format!(
                        "dataset file not found: {}",
                        data_path.display()
                    ));
                }
                let schema_path = Self::resolve(base_dir, schema);
                if !schema_path.is_file() {
                    errs.push(format!(
                        "schema file not found: {}",
                        schema_path.display()
                    ));
                } else if let Err(e) = SchemaConfig::load(&schema_path) {
                    errs.push(format!("schema {}: {e}", schema_path.display()));
                }
                check_fraction(&mut errs, *train_fraction);
            }
        }

        if let Some(c) = &self.compare {
            if c.modes.is_empty() {
                errs.push("compare.modes is empty".into());
            }
            let mut seen = Vec::new();
            for m in &c.modes {
                if seen.contains(m) {
                    errs.push(format!("compare.modes repeats {}", m.name()));
                }
                seen.push(*m);
            }
        }

        // Packing feasibility: the network must fit the profile's slots.
        if self.mode == Mode::EncFl && errs.is_empty() {
            if let (Some(cipher), Ok(width)) =
                (&self.cipher, self.input_width(base_dir))
            {
                let params = CkksParams::profile(cipher.profile);
                let specs = self.layer_specs(width);
                if let Err(e) = layout_for(&specs, params.slots()) {
                    errs.push(format!(
                        "network does not pack into the {} profile: {e}",
                        cipher.profile.name()
                    ));
                }
            }
        }
        errs
    }

    /// The protocol-level view of this config.
    pub fn system_config(&self, input_width: usize) -> SystemConfig {
        SystemConfig {
            mode: self.mode,
            n_rsus: self.federation.n_rsus,
            specs: self.layer_specs(input_width),
            local: TrainConfig {
                learning_rate: self.training.learning_rate,
                batch_size: self.training.batch_size,
                epochs_per_round: self.training.local_epochs,
                rng_seed: 0,
            },
            server: TrainConfig {
                learning_rate: self.training.learning_rate,
                batch_size: self.training.batch_size,
                epochs_per_round: self.training.server_epochs,
                rng_seed: 0,
            },
            profile: self.cipher.as_ref().map(|c| c.profile),
            seed: self.seed,
            t_max: self.t_max,
            convergence: ConvergenceRule {
                window: self.convergence.window,
                min_delta_pp: self.convergence.min_delta_pp,
            },
        }
    }
}

fn check_fraction(errs: &mut Vec<String>, f: f64) {
    if !(f.is_finite() && f > 0.0 && f < 1.0) {
        errs.push(format!(
            "dataset.train_fraction {f} must lie strictly between 0 and 1"
        ));
    }
}
