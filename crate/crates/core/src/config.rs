//! Run configuration: one TOML file, every field optional.
//!
//! ```toml
//! seed = 0
//! out = "ordergate-out"
//!
//! [backend]
//! kind = "synthetic"          # synthetic | replay | remote
//! model = "model.toml"        # synthetic: model spec file
//! # scores = "scores.jsonl"   # replay: recorded score file
//! # record = "scores.jsonl"   # capture every backend response
//!
//! [backend.synthetic]         # synthetic: inline model spec
//! n = 12
//! alpha = 1.0
//! C = 1.0
//! support = 3
//!
//! [backend.remote]
//! url = "http://localhost:8080/score"
//! token_env = "ORDERGATE_REMOTE_TOKEN"
//!
//! [inputs]
//! items = "items.jsonl"
//!
//! [gate]
//! h_star = 0.05
//! m = 6
//!
//! [dispersion]
//! alpha = 1.0
//! ns = [8, 16, 32, 60]
//!
//! [dose]
//! count = 2000
//! noise_sd = 0.3
//!
//! [mixture]
//! eta = 0.1
//! ```
//!
//! The global `seed` drives permutation draws, model sampling and
//! bootstraps; it replaces `gate.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{EgOptions, DEFAULT_RESAMPLES};
use crate::backend::RemoteConfig;
use crate::dose::DoseParams;
use crate::error::{invalid, Result};
use crate::gate::GateConfig;
use crate::synth::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Replay,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: Option<PathBuf>,
    pub synthetic: Option<ModelSpec>,
    pub scores: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub remote: RemoteConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub items: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub records: Option<PathBuf>,
    /// External decision trace for boundary alignment.
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispersionConfig {
    pub alpha: f64,
    #[serde(rename = "C", alias = "c")]
    pub c: f64,
    pub sign: i8,
    pub ns: Vec<usize>,
    pub models_per_n: usize,
    pub draws: usize,
    pub support_min: usize,
    pub support_max: usize,
    pub a_range: f64,
    pub resamples: usize,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        DispersionConfig {
            alpha: 1.0,
            c: 1.0,
            sign: -1,
            ns: vec![8, 16, 32, 60],
            models_per_n: 50,
            draws: 2000,
            support_min: 2,
            support_max: 4,
            a_range: 1.0,
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoseConfig {
    pub count: usize,
    pub trials: usize,
    #[serde(flatten)]
    pub params: DoseParams,
}

impl Default for DoseConfig {
    fn default() -> Self {
        DoseConfig {
            count: 2000,
            trials: 1,
            params: DoseParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Labels forming the event for score-file commands.
    pub positive: Vec<String>,
    /// Run the audit sensitivity grid.
    pub sweep: bool,
    pub backend: BackendConfig,
    pub inputs: Inputs,
    pub gate: GateConfig,
    pub dispersion: DispersionConfig,
    pub dose: DoseConfig,
    pub mixture: EgOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("ordergate-out"),
            positive: vec!["1".into()],
            sweep: false,
            backend: BackendConfig::default(),
            inputs: Inputs::default(),
            gate: GateConfig::default(),
            dispersion: DispersionConfig::default(),
            dose: DoseConfig::default(),
            mixture: EgOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        c.gate.m = 12;
        c.dose.params.noise_sd = 0.1;
        c.backend.synthetic = Some(ModelSpec {
            n: 5,
            a: 0.1,
            w: None,
            w_seed: 3,
            support: Some(2),
            alpha: 1.0,
            c: 0.5,
            sign: -1,
            centered: true,
        });
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[gate]\nhstar = 0.1").is_err());
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::parse("[dose]\ncount = 500\nnoise_sd = 0.0\n[gate]\nm = 3").unwrap();
        assert_eq!(c.dose.count, 500);
        assert_eq!(c.dose.params.noise_sd, 0.0);
        assert_eq!(c.dose.params.first_stage_slope, 0.375);
        assert_eq!(c.gate.m, 3);
        assert_eq!(c.gate.h_star, 0.05);
    }
}
