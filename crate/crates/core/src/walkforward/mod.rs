//! Chronological walk-forward folds, per-fold training with early stopping
//! on validation AUC, and the experiment runner that ties kinds, seeds and
//! folds together.

mod run;
mod train;

pub use run::{run_experiment, BlockRecord, BlockStatus, ExperimentSpec, RunManifest, RunOutput};
pub use train::{
    fit, predict_fold, train_fold, EarlyStopping, EpochRecord, FoldData, FoldOutcome, StopDecision, TrainConfig,
    TrainedFold,
};

use crate::data::DataError;
use crate::models::ModelError;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown protocol `{0}` (expected standard, scaling or nonoverlap)")]
    UnknownProtocol(String),
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("invalid training config: {0}")]
    Train(String),
    #[error("{n} samples cannot hold one fold; at least {required} are needed")]
    TooFewSamples { n: usize, required: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, WalkError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> WalkError + '_ {
    move |source| WalkError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Window sizes in samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub name: String,
    pub k_train: usize,
    pub k_val: usize,
    pub k_test: usize,
    pub k_step: usize,
}

impl ProtocolConfig {
    pub const NAMES: [&'static str; 3] = ["standard", "scaling", "nonoverlap"];

    pub fn standard() -> Self {
        Self::custom("standard", 40, 16, 12, 8)
    }

    pub fn scaling() -> Self {
        Self::custom("scaling", 500, 200, 200, 100)
    }

    /// Step equals the test size, so test windows tile without overlap.
    pub fn nonoverlap() -> Self {
        Self::custom("nonoverlap", 500, 200, 200, 200)
    }

    pub fn custom(name: &str, k_train: usize, k_val: usize, k_test: usize, k_step: usize) -> Self {
        Self {
            name: name.to_string(),
            k_train,
            k_val,
            k_test,
            k_step,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(Self::standard()),
            "scaling" => Ok(Self::scaling()),
            "nonoverlap" | "non_overlap" | "non-overlap" => Ok(Self::nonoverlap()),
            _ => Err(WalkError::UnknownProtocol(name.to_string())),
        }
    }

    pub fn all() -> Vec<Self> {
        vec![Self::standard(), Self::scaling(), Self::nonoverlap()]
    }

    pub fn span(&self) -> usize {
        self.k_train + self.k_val + self.k_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0 || self.k_val == 0 || self.k_test == 0 || self.k_step == 0 {
            return Err(WalkError::Protocol(format!("{}: all window sizes must be positive", self.name)));
        }
        if self.name == "nonoverlap" && self.k_step != self.k_test {
            return Err(WalkError::Protocol("nonoverlap requires step == test size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// `floor((n − span) / step) + 1`, or `None` when not even one fold fits.
pub fn fold_count(n: usize, p: &ProtocolConfig) -> Option<usize> {
    (n >= p.span() && p.k_step > 0).then(|| (n - p.span()) / p.k_step + 1)
}

pub fn make_folds(n: usize, p: &ProtocolConfig) -> Result<Vec<FoldSpec>> {
    p.validate()?;
    let count = fold_count(n, p).ok_or(WalkError::TooFewSamples { n, required: p.span() })?;
    Ok((0..count)
        .map(|f| {
            let s = f * p.k_step;
            let v = s + p.k_train;
            let t = v + p.k_val;
            FoldSpec {
                index: f,
                train: s..v,
                val: v..t,
                test: t..t + p.k_test,
            }
        })
        .collect())
}
