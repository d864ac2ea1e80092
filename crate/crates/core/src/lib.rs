//! Lag-aware gated cross-modal fusion of dense price bars with sporadic,
//! delayed news snapshots, plus the walk-forward training and trading
//! evaluation machinery around it.

pub mod data;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod tensor;
pub mod walkforward;
