//! Directional signal Sharpe stratified by modality lag.

use super::{mean, position_for, sample_std, Position, PredictionRow};
use crate::data::BarAligned;
use std::collections::BTreeMap;
use serde::{Deserialize, Serialize};

/// Bins with fewer samples are flagged.
pub const MIN_BIN_COUNT: usize = 10;
const BARS_PER_YEAR: f64 = 365.0 * 24.0 * 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagBin {
    pub lo: i64,
    /// Exclusive, except for the last bin.
    pub hi: i64,
    pub count: usize,
    pub trades: usize,
    pub mean_return: Option<f64>,
    pub sharpe: Option<f64>,
    pub low_count: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagBinReport {
    pub horizon: usize,
    pub annualisation: f64,
    pub bins: Vec<LagBin>,
}

impl LagBinReport {
    /// `lo,hi,count,trades,mean_return,sharpe,low_count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lag_lo,lag_hi,count,trades,mean_return,sharpe,low_count\n");
        for b in &self.bins {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.lo,
                b.hi,
                b.count,
                b.trades,
                opt(b.mean_return, 8),
                opt(b.sharpe, 6),
                b.low_count
            ));
        }
        s
    }

    /// Index of the bin with the largest defined Sharpe.
    pub fn argmax(&self) -> Option<usize> {
        self.bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.sharpe.map(|s| (i, s)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

pub(crate) fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

/// Edges `0, w, 2w, …` up to and including `tau_max`.
pub fn uniform_edges(width: i64, tau_max: i64) -> Vec<i64> {
    let mut edges: Vec<i64> = (0..).map(|k| k * width).take_while(|&e| e < tau_max).collect();
    edges.push(tau_max);
    edges
}

/// Position `sign(direction_score)` held for the horizon; per-bin annualised
/// Sharpe with `√(35040 / horizon)`. Bins are `[edges[k], edges[k+1])`, the
/// last one closed on the right.
pub fn lag_signal_sharpe(records: &[BarAligned], edges: &[i64], horizon: usize) -> LagBinReport {
    let items = records.iter().map(|r| {
        let s = if r.direction_score > 0.0 {
            Some(r.future_return)
        } else if r.direction_score < 0.0 {
            Some(-r.future_return)
        } else {
            None
        };
        (r.tau, s)
    });
    binned(items, edges, horizon)
}

/// The same stratification for a model's thresholded trades, one report
/// per model. Flat positions count towards the bin but are not trades.
pub fn prediction_lag_bins(
    rows: &[PredictionRow],
    edges: &[i64],
    horizon: usize,
    theta_long: f64,
    theta_short: f64,
) -> BTreeMap<String, LagBinReport> {
    let mut by_model: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_model.entry(r.model.as_str()).or_default().push(r);
    }
    by_model
        .into_iter()
        .map(|(m, rs)| {
            let items = rs.into_iter().map(|r| {
                let pos = position_for(r.probability, theta_long, theta_short);
                let ret = (pos != Position::Flat).then(|| pos.sign() * r.future_return);
                (r.tau_lag.round() as i64, ret)
            });
            (m.to_string(), binned(items, edges, horizon))
        })
        .collect()
}

fn binned(items: impl Iterator<Item = (i64, Option<f64>)>, edges: &[i64], horizon: usize) -> LagBinReport {
    assert!(edges.len() >= 2 && edges.windows(2).all(|w| w[0] < w[1]), "edges must increase");
    let annualisation = (BARS_PER_YEAR / horizon as f64).sqrt();
    let nb = edges.len() - 1;
    let mut rets: Vec<Vec<f64>> = vec![Vec::new(); nb];
    let mut counts = vec![0usize; nb];
    for (tau, ret) in items {
        let Some(k) = bin_of(edges, tau) else { continue };
        counts[k] += 1;
        if let Some(r) = ret {
            rets[k].push(r);
        }
    }
    let bins = (0..nb)
        .map(|k| {
            let sd = sample_std(&rets[k]).filter(|s| *s > 0.0);
            let m = mean(&rets[k]);
            LagBin {
                lo: edges[k],
                hi: edges[k + 1],
                count: counts[k],
                trades: rets[k].len(),
                mean_return: m,
                sharpe: sd.and_then(|sd| m.map(|m| m / sd * annualisation)),
                low_count: counts[k] < MIN_BIN_COUNT,
            }
        })
        .collect();
    LagBinReport {
        horizon,
        annualisation,
        bins,
    }
}

fn bin_of(edges: &[i64], tau: i64) -> Option<usize> {
    let last = *edges.last()?;
    if tau < edges[0] || tau > last {
        return None;
    }
    if tau == last {
        return Some(edges.len() - 2);
    }
    Some(edges.partition_point(|&e| e <= tau) - 1)
}
