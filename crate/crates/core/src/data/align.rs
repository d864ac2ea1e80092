//! As-of pairing of bars with the most recent snapshot.

use super::{Bar, DataError, Result, Snapshot};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignParams {
    /// Maximum admissible lag in minutes (inclusive).
    pub tau_max: i64,
    /// Window length in bars, ending at the decision bar.
    pub lookback: usize,
    /// Label horizon in bars.
    pub horizon: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            tau_max: 180,
            lookback: 64,
            horizon: 4,
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau_max < 0 {
            return Err(DataError::Invalid(format!("tau_max {} is negative", self.tau_max)));
        }
        if self.lookback == 0 || self.horizon == 0 {
            return Err(DataError::Invalid("lookback and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the latest snapshot with `timestamp ≤ t` and `t − timestamp ≤
/// tau_max`. `times` must be sorted ascending.
pub fn latest_within(times: &[i64], t: i64, tau_max: i64) -> Option<usize> {
    let k = times.partition_point(|&s| s <= t);
    let j = k.checked_sub(1)?;
    (t - times[j] <= tau_max).then_some(j)
}

/// Label and simple return over `horizon` bars from bar `i`.
pub fn compute_label(bars: &[Bar], i: usize, horizon: usize) -> Option<(u8, f64)> {
    let end = bars.get(i.checked_add(horizon)?)?;
    let c0 = bars.get(i)?.close;
    let r = (end.close - c0) / c0;
    Some((u8::from(r > 0.0), r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSample {
    pub bar_index: usize,
    pub snapshot_index: usize,
    pub time: i64,
    pub tau: i64,
    pub label: u8,
    pub future_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventAlignment {
    pub samples: Vec<EventSample>,
    /// Bars with enough history and future to be decision points.
    pub candidates: usize,
    /// Candidates without a snapshot inside the lag cap.
    pub dropped: usize,
}

fn snapshot_times(snapshots: &[Snapshot]) -> Result<Vec<i64>> {
    let times: Vec<i64> = snapshots.iter().map(|s| s.timestamp).collect();
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(DataError::Invalid("snapshots must be sorted by timestamp".into()));
    }
    Ok(times)
}

/// Training samples: every bar with `lookback` bars of history (itself
/// included) and `horizon` bars of future, paired with its latest
/// snapshot inside the lag cap.
pub fn align_event(bars: &[Bar], snapshots: &[Snapshot], params: AlignParams) -> Result<EventAlignment> {
    params.validate()?;
    let need = params.lookback + params.horizon;
    if bars.len() < need {
        return Err(DataError::Infeasible(format!(
            "{} bars cannot hold a {}-bar window plus a {}-bar horizon",
            bars.len(),
            params.lookback,
            params.horizon
        )));
    }
    let times = snapshot_times(snapshots)?;
    let range = params.lookback - 1..bars.len() - params.horizon;
    let candidates = range.len();
    let samples: Vec<EventSample> = range
        .filter_map(|i| {
            let t = bars[i].timestamp;
            let j = latest_within(&times, t, params.tau_max)?;
            let (label, future_return) = compute_label(bars, i, params.horizon)?;
            Some(EventSample {
                bar_index: i,
                snapshot_index: j,
                time: t,
                tau: t - times[j],
                label,
                future_return,
            })
        })
        .collect();
    Ok(EventAlignment {
        dropped: candidates - samples.len(),
        samples,
        candidates,
    })
}

/// Lightweight per-bar record for lag-stratified signal analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarAligned {
    pub bar_index: usize,
    pub time: i64,
    pub tau: i64,
    pub direction_score: f64,
    pub future_return: f64,
    pub label: u8,
}

/// Every bar with `horizon` future bars, paired under the same rule as
/// [`align_event`] but without a history requirement.
pub fn align_bars(
    bars: &[Bar],
    snapshots: &[Snapshot],
    tau_max: i64,
    horizon: usize,
    direction_index: usize,
) -> Result<Vec<BarAligned>> {
    AlignParams {
        tau_max,
        lookback: 1,
        horizon,
    }
    .validate()?;
    if bars.len() <= horizon {
        return Err(DataError::Infeasible(format!(
            "{} bars cannot hold a {horizon}-bar horizon",
            bars.len()
        )));
    }
    let times = snapshot_times(snapshots)?;
    Ok((0..bars.len() - horizon)
        .filter_map(|i| {
            let t = bars[i].timestamp;
            let j = latest_within(&times, t, tau_max)?;
            let (label, future_return) = compute_label(bars, i, horizon)?;
            Some(BarAligned {
                bar_index: i,
                time: t,
                tau: t - times[j],
                direction_score: snapshots[j].scalars[direction_index],
                future_return,
                label,
            })
        })
        .collect())
}
