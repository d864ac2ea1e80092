//! Classification, calibration and trading statistics.
//!
//! Undefined quantities (single-class AUC, Sharpe with fewer than two
//! trades or zero dispersion, ...) are `None` rather than NaN.

mod lag;
mod report;

pub use lag::{lag_signal_sharpe, prediction_lag_bins, uniform_edges, LagBin, LagBinReport, MIN_BIN_COUNT};
pub use report::{
    build_report, read_predictions, write_predictions, BootstrapRow, FoldMetrics, ModelSummary, PredictionRow,
    Report, ReportOptions,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("thresholds must satisfy short < long (got {short} / {long})")]
    Thresholds { short: f64, long: f64 },
    #[error("fold sets differ between the compared models")]
    FoldMismatch,
    #[error("bootstrap needs at least one fold and one resample")]
    EmptyBootstrap,
    #[error("prediction file error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const THETA_LONG: f64 = 0.55;
pub const THETA_SHORT: f64 = 0.45;

/// Area under the ROC curve via average ranks (Mann–Whitney U with ties
/// counted one half).
pub fn auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    if probs.len() != labels.len() {
        return None;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && probs[idx[j + 1]] == probs[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn brier(probs: &[f64], labels: &[u8]) -> Option<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return None;
    }
    let s: f64 = probs.iter().zip(labels).map(|(p, &y)| (p - y as f64).powi(2)).sum();
    Some(s / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Long,
    Short,
    Flat,
}

impl Position {
    pub fn sign(self) -> f64 {
        match self {
            Position::Long => 1.0,
            Position::Short => -1.0,
            Position::Flat => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub sample_id: u64,
    pub position: Position,
    pub ret: f64,
    pub tau: f64,
    pub fold: usize,
    pub seed: u64,
}

pub fn position_for(p: f64, theta_long: f64, theta_short: f64) -> Position {
    if p >= theta_long {
        Position::Long
    } else if p <= theta_short {
        Position::Short
    } else {
        Position::Flat
    }
}

/// Map each prediction to a position and its realised return.
pub fn threshold_trades(
    preds: &[PredictionRow],
    theta_long: f64,
    theta_short: f64,
) -> Result<Vec<TradeRecord>> {
    if !(theta_short < theta_long) {
        return Err(MetricsError::Thresholds {
            short: theta_short,
            long: theta_long,
        });
    }
    Ok(preds
        .iter()
        .map(|p| {
            let position = position_for(p.probability, theta_long, theta_short);
            TradeRecord {
                sample_id: p.sample_id,
                position,
                ret: position.sign() * p.future_return,
                tau: p.tau_lag,
                fold: p.fold,
                seed: p.seed,
            }
        })
        .collect())
}

/// Returns of the non-flat trades, in input order.
pub fn trade_returns(trades: &[TradeRecord]) -> Vec<f64> {
    trades.iter().filter(|t| t.position != Position::Flat).map(|t| t.ret).collect()
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (ddof = 1).
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// `mean / std · √n_scale` over trade returns.
pub fn sharpe(returns: &[f64], n_scale: f64) -> Option<f64> {
    let sd = sample_std(returns)?;
    if !(sd > 0.0) || !(n_scale > 0.0) {
        return None;
    }
    Some(mean(returns)? / sd * n_scale.sqrt())
}

/// Worst peak-to-trough decline of the cumulative-sum equity curve,
/// as a non-positive number. The curve starts at zero.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut equity, mut peak, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for r in returns {
        equity += r;
        peak = peak.max(equity);
        worst = worst.min(equity - peak);
    }
    worst
}

/// Share of trades with strictly positive return.
pub fn hit_rate(returns: &[f64]) -> Option<f64> {
    (!returns.is_empty()).then(|| returns.iter().filter(|&&r| r > 0.0).count() as f64 / returns.len() as f64)
}

const T975: [f64; 30] = [
    12.706204736, 4.302652730, 3.182446305, 2.776445105, 2.570581836, 2.446911851, 2.364624252, 2.306004135,
    2.262157163, 2.228138852, 2.200985160, 2.178812830, 2.160368656, 2.144786688, 2.131449546, 2.119905299,
    2.109815578, 2.100922040, 2.093024054, 2.085963447, 2.079613845, 2.073873068, 2.068657610, 2.063898562,
    2.059538553, 2.055529439, 2.051830516, 2.048407142, 2.045229642, 2.042272456,
];

/// Two-sided 95% Student-t critical value. Tabulated for `df ≤ 30`, a
/// four-term Cornish–Fisher expansion beyond.
pub fn t_critical_975(df: usize) -> Option<f64> {
    match df {
        0 => None,
        1..=30 => Some(T975[df - 1]),
        _ => {
            let z: f64 = 1.959963984540054;
            let nu = df as f64;
            let g1 = (z.powi(3) + z) / 4.0;
            let g2 = (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / 96.0;
            let g3 = (3.0 * z.powi(7) + 19.0 * z.powi(5) + 17.0 * z.powi(3) - 15.0 * z) / 384.0;
            let g4 = (79.0 * z.powi(9) + 776.0 * z.powi(7) + 1482.0 * z.powi(5) - 1920.0 * z.powi(3) - 945.0 * z)
                / 92160.0;
            Some(z + g1 / nu + g2 / nu.powi(2) + g3 / nu.powi(3) + g4 / nu.powi(4))
        }
    }
}

/// `(mean, half-width)` of the 95% t-interval over per-seed means.
pub fn seed_t_interval(means: &[f64]) -> Option<(f64, f64)> {
    let n = means.len();
    let sd = sample_std(means)?;
    let t = t_critical_975(n - 1)?;
    Some((mean(means)?, t * sd / (n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub positive: usize,
    pub folds: usize,
}

impl BootstrapResult {
    pub fn half_width(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }
}

/// Linear-interpolated percentile of sorted data (`q` in `[0, 100]`).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of the mean of per-fold deltas.
pub fn bootstrap_deltas(deltas: &[f64], resamples: usize, seed: u64, lo_pct: f64, hi_pct: f64) -> Result<BootstrapResult> {
    if deltas.is_empty() || resamples == 0 {
        return Err(MetricsError::EmptyBootstrap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = deltas.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| deltas[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        mean_delta: deltas.iter().sum::<f64>() / n as f64,
        ci_lo: percentile_sorted(&means, lo_pct),
        ci_hi: percentile_sorted(&means, hi_pct),
        positive: deltas.iter().filter(|&&d| d > 0.0).count(),
        folds: n,
    })
}

/// Bootstrap of `a − b` over folds present in both maps; the fold sets must
/// be identical.
pub fn matched_fold_bootstrap(
    a: &std::collections::BTreeMap<usize, f64>,
    b: &std::collections::BTreeMap<usize, f64>,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if a.len() != b.len() || a.keys().ne(b.keys()) {
        return Err(MetricsError::FoldMismatch);
    }
    let deltas: Vec<f64> = a.iter().map(|(k, va)| va - b[k]).collect();
    bootstrap_deltas(&deltas, resamples, seed, 2.5, 97.5)
}
