//! Aggregation of prediction files into comparison tables.
//!
//! Per (model, seed, fold) metrics are computed first. A fold whose Sharpe
//! is undefined (fewer than two trades, or no dispersion) contributes 0 to
//! the aggregates and is counted in `undefined_sharpe_folds`.

use super::lag::opt;
use super::{
    auc, brier, hit_rate, matched_fold_bootstrap, max_drawdown, mean, sample_std, seed_t_interval, sharpe,
    threshold_trades, trade_returns, MetricsError, Result, THETA_LONG, THETA_SHORT,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One test-set prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: u64,
    pub fold: usize,
    pub seed: u64,
    pub model: String,
    pub probability: f64,
    pub label: u8,
    pub future_return: f64,
    pub tau_lag: f64,
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MetricsError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| MetricsError::Io(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub theta_long: f64,
    pub theta_short: f64,
    /// Models to report deltas against.
    pub baselines: Vec<String>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            theta_long: THETA_LONG,
            theta_short: THETA_SHORT,
            baselines: Vec::new(),
            bootstrap_resamples: 10_000,
            bootstrap_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub model: String,
    pub seed: u64,
    pub fold: usize,
    pub n: usize,
    pub trades: usize,
    pub auc: Option<f64>,
    pub brier: Option<f64>,
    /// Scaled by √(number of trades).
    pub sharpe: Option<f64>,
    /// Scaled by √(number of test predictions).
    pub sharpe_per_prediction: Option<f64>,
    pub hit_rate: Option<f64>,
    pub max_drawdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub seeds: usize,
    pub folds: usize,
    /// Mean over seeds of each seed's mean fold Sharpe.
    pub sharpe_mean: f64,
    pub sharpe_std_seeds: Option<f64>,
    /// Std over folds of the seed-averaged fold Sharpe.
    pub sharpe_std_folds: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub sharpe_per_prediction_mean: f64,
    pub hit_rate_mean: Option<f64>,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub brier_mean: Option<f64>,
    pub brier_std: Option<f64>,
    pub max_drawdown_mean: f64,
    pub trades: usize,
    pub undefined_sharpe_folds: usize,
    pub seed_means: BTreeMap<u64, f64>,
    pub fold_means: BTreeMap<usize, f64>,
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub model: String,
    pub baseline: String,
    pub mean_delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub positive_folds: usize,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub options: ReportOptions,
    pub folds: Vec<FoldMetrics>,
    pub models: Vec<ModelSummary>,
    pub bootstrap: Vec<BootstrapRow>,
    pub warnings: Vec<String>,
}

fn fold_metrics(model: &str, seed: u64, fold: usize, rows: &[PredictionRow], opts: &ReportOptions) -> Result<FoldMetrics> {
    let probs: Vec<f64> = rows.iter().map(|r| r.probability).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let trades = threshold_trades(rows, opts.theta_long, opts.theta_short)?;
    let rets = trade_returns(&trades);
    Ok(FoldMetrics {
        model: model.to_string(),
        seed,
        fold,
        n: rows.len(),
        trades: rets.len(),
        auc: auc(&probs, &labels),
        brier: brier(&probs, &labels),
        sharpe: sharpe(&rets, rets.len() as f64),
        sharpe_per_prediction: sharpe(&rets, rows.len() as f64),
        hit_rate: hit_rate(&rets),
        max_drawdown: max_drawdown(&rets),
    })
}

fn defined_mean_std(xs: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = xs.flatten().collect();
    (mean(&v), sample_std(&v))
}

/// Build the full report. Rows are grouped by (model, seed, fold) and
/// ordered by sample id inside each group, so input order is irrelevant.
pub fn build_report(rows: &[PredictionRow], opts: &ReportOptions) -> Result<Report> {
    let mut groups: BTreeMap<(String, u64, usize), Vec<PredictionRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model.clone(), r.seed, r.fold)).or_default().push(r.clone());
    }
    let mut folds = Vec::with_capacity(groups.len());
    for ((model, seed, fold), mut g) in groups {
        g.sort_by_key(|r| r.sample_id);
        folds.push(fold_metrics(&model, seed, fold, &g, opts)?);
    }

    let models: BTreeSet<String> = folds.iter().map(|f| f.model.clone()).collect();
    let mut summaries = Vec::new();
    for m in &models {
        let mine: Vec<&FoldMetrics> = folds.iter().filter(|f| &f.model == m).collect();
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut per_pred: Vec<f64> = Vec::new();
        for f in &mine {
            let s = f.sharpe.unwrap_or(0.0);
            by_seed.entry(f.seed).or_default().push(s);
            by_fold.entry(f.fold).or_default().push(s);
            per_pred.push(f.sharpe_per_prediction.unwrap_or(0.0));
        }
        let seed_means: BTreeMap<u64, f64> = by_seed.iter().map(|(k, v)| (*k, mean(v).unwrap_or(0.0))).collect();
        let fold_means: BTreeMap<usize, f64> = by_fold.iter().map(|(k, v)| (*k, mean(v).unwrap_or(0.0))).collect();
        let sm: Vec<f64> = seed_means.values().copied().collect();
        let fm: Vec<f64> = fold_means.values().copied().collect();
        let ci = seed_t_interval(&sm);
        let (auc_mean, auc_std) = defined_mean_std(mine.iter().map(|f| f.auc));
        let (brier_mean, brier_std) = defined_mean_std(mine.iter().map(|f| f.brier));
        let dd: Vec<f64> = mine.iter().map(|f| f.max_drawdown).collect();
        summaries.push(ModelSummary {
            model: m.clone(),
            seeds: seed_means.len(),
            folds: fold_means.len(),
            sharpe_mean: mean(&sm).unwrap_or(0.0),
            sharpe_std_seeds: sample_std(&sm),
            sharpe_std_folds: sample_std(&fm),
            ci_lo: ci.map(|(m, h)| m - h),
            ci_hi: ci.map(|(m, h)| m + h),
            sharpe_per_prediction_mean: mean(&per_pred).unwrap_or(0.0),
            hit_rate_mean: defined_mean_std(mine.iter().map(|f| f.hit_rate)).0,
            auc_mean,
            auc_std,
            brier_mean,
            brier_std,
            max_drawdown_mean: mean(&dd).unwrap_or(0.0),
            trades: mine.iter().map(|f| f.trades).sum(),
            undefined_sharpe_folds: mine.iter().filter(|f| f.sharpe.is_none()).count(),
            seed_means,
            fold_means,
            deltas: BTreeMap::new(),
        });
    }

    let mut warnings = Vec::new();
    let mut bootstrap = Vec::new();
    let index: BTreeMap<String, usize> = summaries.iter().enumerate().map(|(i, s)| (s.model.clone(), i)).collect();
    for base in &opts.baselines {
        let Some(&bi) = index.get(base) else {
            warnings.push(format!("baseline `{base}` has no predictions; delta column omitted"));
            continue;
        };
        let (base_mean, base_folds) = (summaries[bi].sharpe_mean, summaries[bi].fold_means.clone());
        for i in 0..summaries.len() {
            if i == bi {
                continue;
            }
            let s = &mut summaries[i];
            s.deltas.insert(base.clone(), s.sharpe_mean - base_mean);
            match matched_fold_bootstrap(&s.fold_means, &base_folds, opts.bootstrap_resamples, opts.bootstrap_seed) {
                Ok(b) => bootstrap.push(BootstrapRow {
                    model: s.model.clone(),
                    baseline: base.clone(),
                    mean_delta: b.mean_delta,
                    ci_lo: b.ci_lo,
                    ci_hi: b.ci_hi,
                    positive_folds: b.positive,
                    folds: b.folds,
                }),
                Err(e) => warnings.push(format!("{} vs {base}: {e}", s.model)),
            }
        }
    }

    Ok(Report {
        options: opts.clone(),
        folds,
        models: summaries,
        bootstrap,
        warnings,
    })
}

impl Report {
    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == model)
    }

    fn present_baselines(&self) -> Vec<&String> {
        self.options
            .baselines
            .iter()
            .filter(|b| self.models.iter().any(|m| &m.model == *b))
            .collect()
    }

    /// Headline comparison: Sharpe mean, spreads, 95% CI over seed means,
    /// deltas against each baseline, hit rate.
    pub fn main_csv(&self) -> String {
        let bases = self.present_baselines();
        let mut s = String::from(
            "model,seeds,folds,sharpe_mean,sharpe_std_seeds,sharpe_std_folds,ci95_lo,ci95_hi",
        );
        for b in &bases {
            s.push_str(&format!(",delta_vs_{b}"));
        }
        s.push_str(",hit_rate,sharpe_per_prediction_mean,trades,undefined_sharpe_folds\n");
        for m in &self.models {
            s.push_str(&format!(
                "{},{},{},{:.6},{},{},{},{}",
                m.model,
                m.seeds,
                m.folds,
                m.sharpe_mean,
                opt(m.sharpe_std_seeds, 6),
                opt(m.sharpe_std_folds, 6),
                opt(m.ci_lo, 6),
                opt(m.ci_hi, 6)
            ));
            for b in &bases {
                s.push(',');
                s.push_str(&opt(m.deltas.get(*b).copied(), 6));
            }
            s.push_str(&format!(
                ",{},{:.6},{},{}\n",
                opt(m.hit_rate_mean, 6),
                m.sharpe_per_prediction_mean,
                m.trades,
                m.undefined_sharpe_folds
            ));
        }
        s
    }

    pub fn aux_csv(&self) -> String {
        let mut s = String::from("model,auc_mean,auc_std,brier_mean,brier_std,max_drawdown_mean\n");
        for m in &self.models {
            s.push_str(&format!(
                "{},{},{},{},{},{:.8}\n",
                m.model,
                opt(m.auc_mean, 6),
                opt(m.auc_std, 6),
                opt(m.brier_mean, 6),
                opt(m.brier_std, 6),
                m.max_drawdown_mean
            ));
        }
        s
    }

    pub fn folds_csv(&self) -> String {
        let mut s = String::from("model,seed,fold,n,trades,auc,brier,sharpe,sharpe_per_prediction,hit_rate,max_drawdown\n");
        for f in &self.folds {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{:.8}\n",
                f.model,
                f.seed,
                f.fold,
                f.n,
                f.trades,
                opt(f.auc, 6),
                opt(f.brier, 6),
                opt(f.sharpe, 6),
                opt(f.sharpe_per_prediction, 6),
                opt(f.hit_rate, 6),
                f.max_drawdown
            ));
        }
        s
    }

    pub fn bootstrap_csv(&self) -> String {
        let mut s = String::from("model,baseline,mean_delta,ci95_lo,ci95_hi,positive_folds,folds\n");
        for b in &self.bootstrap {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{}\n",
                b.model, b.baseline, b.mean_delta, b.ci_lo, b.ci_hi, b.positive_folds, b.folds
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Fixed-width table; the best mean Sharpe is marked with `*`.
    pub fn render_text(&self) -> String {
        let best = self
            .models
            .iter()
            .max_by(|a, b| a.sharpe_mean.total_cmp(&b.sharpe_mean))
            .map(|m| m.model.clone());
        let bases = self.present_baselines();
        let mut s = format!(
            "{:<14} {:>5} {:>5} {:>10} {:>8} {:>21}",
            "model", "seeds", "folds", "sharpe", "std", "95% CI"
        );
        for b in &bases {
            s.push_str(&format!(" {:>12}", format!("d_{b}")));
        }
        s.push_str(&format!(" {:>8} {:>7} {:>7}\n", "hit", "auc", "brier"));
        for m in &self.models {
            let mark = if Some(&m.model) == best.as_ref() { "*" } else { " " };
            let ci = match (m.ci_lo, m.ci_hi) {
                (Some(lo), Some(hi)) => format!("[{lo:+.3}, {hi:+.3}]"),
                _ => "n/a".to_string(),
            };
            s.push_str(&format!(
                "{:<14} {:>5} {:>5} {:>9.3}{} {:>8} {:>21}",
                m.model,
                m.seeds,
                m.folds,
                m.sharpe_mean,
                mark,
                m.sharpe_std_seeds.map_or("n/a".into(), |v| format!("{v:.3}")),
                ci
            ));
            for b in &bases {
                let d = m.deltas.get(*b).map_or("-".into(), |v| format!("{v:+.3}"));
                s.push_str(&format!(" {d:>12}"));
            }
            let pct = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v));
            let f3 = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.3}"));
            s.push_str(&format!(" {:>8} {:>7} {:>7}\n", pct(m.hit_rate_mean), f3(m.auc_mean), f3(m.brier_mean)));
        }
        for b in &self.bootstrap {
            s.push_str(&format!(
                "{} - {}: mean {:+.3}, 95% CI [{:+.3}, {:+.3}], {} of {} folds positive\n",
                b.model, b.baseline, b.mean_delta, b.ci_lo, b.ci_hi, b.positive_folds, b.folds
            ));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}
