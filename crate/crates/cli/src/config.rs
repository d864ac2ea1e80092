//! TOML run configuration. Every section is optional and every key has a
//! command-line counterpart; flags take precedence.

use crate::CliError;
use cgcma::metrics::{ReportOptions, THETA_LONG, THETA_SHORT};
use cgcma::models::ModelConfig;
use cgcma::synth::SynthConfig;
use cgcma::walkforward::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub report: ReportSection,
    pub lag: LagSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub prices: Vec<PathBuf>,
    pub web: Vec<PathBuf>,
    pub assets: Vec<String>,
    pub schema: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub tau_max: i64,
    pub lookback: usize,
    pub horizon: usize,
    /// `name:threshold` on an absolute web scalar.
    pub min_strength: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = cgcma::data::AlignParams::default();
        Self {
            prices: Vec::new(),
            web: Vec::new(),
            assets: Vec::new(),
            schema: None,
            dataset: None,
            tau_max: p.tau_max,
            lookback: p.lookback,
            horizon: p.horizon,
            min_strength: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub protocol: String,
    pub kinds: Vec<String>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub max_folds: Option<usize>,
    pub checkpoints: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            protocol: "nonoverlap".into(),
            kinds: vec!["price_tx".into(), "cgcma".into()],
            seeds: vec![1, 2, 3, 4],
            jobs: 1,
            max_folds: None,
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub baselines: Vec<String>,
    pub theta_long: f64,
    pub theta_short: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub horizon: usize,
    pub edges: Vec<i64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        let o = ReportOptions::default();
        Self {
            baselines: o.baselines,
            theta_long: THETA_LONG,
            theta_short: THETA_SHORT,
            bootstrap_resamples: o.bootstrap_resamples,
            bootstrap_seed: o.bootstrap_seed,
            horizon: cgcma::data::AlignParams::default().horizon,
            edges: vec![0, 30, 60, 90, 180],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagSection {
    /// Explicit bin edges; overrides `bin_width`.
    pub edges: Vec<i64>,
    pub bin_width: i64,
}

impl Default for LagSection {
    fn default() -> Self {
        Self {
            edges: Vec::new(),
            bin_width: 30,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))
}
