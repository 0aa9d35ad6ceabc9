//! Federated training over vehicular clients with an untrusted server.
//!
//! The system has N vehicle clients (VUs), M roadside relays (RSUs)
//! and one central server. Each round every VU trains its model copy
//! on retained local data, the server trains its copy on the data the
//! VUs offloaded to it, and the N+1 parameter sets are averaged into
//! the next global model. Three modes share this harness:
//!
//! * CFL: nothing is offloaded, nothing is encrypted; the server only
//!   averages the N client models.
//! * N-EncFL: offloaded data and parameters travel as plaintext and
//!   the server trains in the clear. Its training uses the same
//!   polynomial activation the encrypted path is forced to use, so the
//!   two modes differ only by ciphertext noise, not by surrogate
//!   error.
//! * EncFL: everything leaving a VU after round 0 is encrypted under a
//!   coalition key the server never holds; the server trains and
//!   averages on ciphertexts and learns neither data nor parameters.
//!
//! RSUs are pure relays that stamp and count traffic. Refresh requests
//! route to the lowest-id VU, the coalition key holder, and their
//! bytes appear in the traffic log so the cost of interactive noise
//! refresh stays visible.

pub mod bus;
pub mod protocol;

use thiserror::Error;

use crate::ckks::params::CkksError;
use crate::data::DataError;
use crate::model_io::ModelIoError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("protocol config: {0}")]
    Config(String),
    #[error("vu {vu} parameters: {detail}")]
    Shape { vu: usize, detail: String },
    #[error(transparent)]
    Ckks(#[from] CkksError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
}

/// Which of the three experiment arms is running.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cfl,
    NEncFl,
    EncFl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cfl => "CFL",
            Mode::NEncFl => "N-EncFL",
            Mode::EncFl => "EncFL",
        }
    }

    /// The lowercase config-file token; `parse` accepts it back.
    pub fn token(self) -> &'static str {
        match self {
            Mode::Cfl => "cfl",
            Mode::NEncFl => "n-encfl",
            Mode::EncFl => "encfl",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "cfl" => Some(Mode::Cfl),
            "n-encfl" | "nencfl" => Some(Mode::NEncFl),
            "encfl" => Some(Mode::EncFl),
            _ => None,
        }
    }

    pub fn all() -> [Mode; 3] {
        [Mode::Cfl, Mode::NEncFl, Mode::EncFl]
    }
}

impl serde::Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> serde::Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Mode, D::Error> {
        let s = String::deserialize(d)?;
        Mode::parse(&s).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown mode {s:?}, expected cfl, n-encfl or encfl"
            ))
        })
    }
}

/// Stop when the 5-round moving average of validation accuracy moves
/// by less than a tenth of a percentage point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRule {
    pub window: usize,
    pub min_delta_pp: f64,
}

impl Default for ConvergenceRule {
    fn default() -> ConvergenceRule {
        ConvergenceRule { window: 5, min_delta_pp: 0.1 }
    }
}

impl ConvergenceRule {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.window == 0 {
            return Err(FlError::Config("convergence window must be at least 1".into()));
        }
        if !self.min_delta_pp.is_finite() || self.min_delta_pp < 0.0 {
            return Err(FlError::Config(format!(
                "convergence threshold {} must be finite and non-negative",
                self.min_delta_pp
            )));
        }
        Ok(())
    }

    /// True once the windowed average of `accuracy` has flattened.
    pub fn converged(&self, accuracy: &[f64]) -> bool {
        let w = self.window;
        if accuracy.len() < w + 1 {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let now = mean(&accuracy[accuracy.len() - w..]);
        let prev = mean(&accuracy[accuracy.len() - w - 1..accuracy.len() - 1]);
        (now - prev).abs() * 100.0 < self.min_delta_pp
    }
}

pub use bus::{Bus, MessageKind, MessageMeta, Party};
pub use protocol::{
    aggregate_enc, aggregate_plain, classify, pre_learning, round_log_line,
    timing_log_line, PhaseTimings, RoundRecord, RunOutcome, System,
    SystemConfig, VuState,
};
