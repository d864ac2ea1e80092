//! Price bars, web snapshots, causal as-of alignment and the aligned
//! dataset used for training and lag analysis.
//!
//! All timestamps are integer epoch minutes (UTC). A bar's timestamp is
//! its close time, so a bar stamped `t` is fully observable at `t`.

mod align;
mod dataset;
mod features;
mod ohlcv;
mod web;

pub use align::{
    align_bars, align_event, compute_label, latest_within, AlignParams, BarAligned, EventAlignment,
    EventSample,
};
pub use dataset::{AlignedSample, AssetData, AssetStats, CorpusStats, Dataset, SampleRef, WebNorm};
pub use features::{featurize_window, FEATURE_NAMES, PRICE_FEATURES};
pub use ohlcv::{load_ohlcv, parse_ohlcv, parse_timestamp, write_ohlcv, Bar, BarSeries, Gap, BAR_MINUTES};
pub use web::{load_web, parse_web, write_web, Snapshot, WebLoad, WebSchema, EMBED_DIM, WEB_SCALARS};

use thiserror::Error;

/// One rejected input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: u64,
    pub reason: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("{} invalid row(s):\n{}", .0.len(), join_lines(.0))]
    Rows(Vec<LineError>),
    #[error("duplicate timestamp {timestamp} (line {line})")]
    Duplicate { timestamp: i64, line: u64 },
    #[error("invalid timestamp `{0}`")]
    Timestamp(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("infeasible alignment: {0}")]
    Infeasible(String),
    #[error("dataset encoding error: {0}")]
    Encoding(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

fn join_lines(errs: &[LineError]) -> String {
    errs.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests;
