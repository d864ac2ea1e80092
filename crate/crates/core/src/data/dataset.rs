use super::align::{align_event, AlignParams};
use super::features::featurize_window;
use super::{io_err, Bar, DataError, Result, Snapshot, WebSchema};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const WEB_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetData {
    pub name: String,
    pub bars: Vec<Bar>,
    pub snapshots: Vec<Snapshot>,
}

/// Compact sample record; windows and embeddings are looked up on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: u64,
    pub asset: usize,
    pub bar_index: usize,
    pub snapshot_index: usize,
    pub time: i64,
    pub tau: i64,
    pub label: u8,
    pub future_return: f64,
}

/// A fully materialised decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub id: u64,
    pub asset: String,
    pub time: i64,
    /// `L × 16` row-major features.
    pub window: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Raw (unnormalised) scalars in schema order.
    pub scalars: Vec<f64>,
    pub tau: f64,
    pub label: u8,
    pub future_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub params: AlignParams,
    pub schema: WebSchema,
    pub assets: Vec<AssetData>,
    /// Chronological (ties broken by asset index).
    pub samples: Vec<SampleRef>,
    pub candidates: usize,
    pub dropped: usize,
    /// Samples removed by the optional strength filter.
    pub filtered: usize,
}

impl Dataset {
    /// Align one asset. `min_strength` keeps only samples whose named scalar
    /// has absolute value at least the threshold.
    pub fn build(
        asset: &str,
        bars: Vec<Bar>,
        snapshots: Vec<Snapshot>,
        schema: WebSchema,
        params: AlignParams,
        min_strength: Option<(&str, f64)>,
    ) -> Result<Self> {
        schema.validate()?;
        let alignment = align_event(&bars, &snapshots, params)?;
        let filter = match min_strength {
            Some((name, thr)) => Some((schema.index_of(name)?, thr)),
            None => None,
        };
        let mut filtered = 0;
        let samples = alignment
            .samples
            .iter()
            .filter(|s| match filter {
                Some((k, thr)) if snapshots[s.snapshot_index].scalars[k].abs() < thr => {
                    filtered += 1;
                    false
                }
                _ => true,
            })
            .enumerate()
            .map(|(id, s)| SampleRef {
                id: id as u64,
                asset: 0,
                bar_index: s.bar_index,
                snapshot_index: s.snapshot_index,
                time: s.time,
                tau: s.tau,
                label: s.label,
                future_return: s.future_return,
            })
            .collect();
        Ok(Self {
            params,
            schema,
            assets: vec![AssetData {
                name: asset.to_string(),
                bars,
                snapshots,
            }],
            samples,
            candidates: alignment.candidates,
            dropped: alignment.dropped,
            filtered,
        })
    }

    /// Merge per-asset datasets into one chronological sample list.
    pub fn pool(parts: Vec<Dataset>) -> Result<Self> {
        let first = parts.first().ok_or_else(|| DataError::Invalid("nothing to pool".into()))?;
        let (params, schema) = (first.params, first.schema.clone());
        let mut out = Self {
            params,
            schema,
            assets: Vec::new(),
            samples: Vec::new(),
            candidates: 0,
            dropped: 0,
            filtered: 0,
        };
        for part in parts {
            if part.params != out.params || part.schema != out.schema {
                return Err(DataError::Invalid("pooled datasets must share params and schema".into()));
            }
            let offset = out.assets.len();
            out.samples.extend(part.samples.iter().map(|s| SampleRef {
                asset: s.asset + offset,
                ..*s
            }));
            out.assets.extend(part.assets);
            out.candidates += part.candidates;
            out.dropped += part.dropped;
            out.filtered += part.filtered;
        }
        out.samples.sort_by_key(|s| (s.time, s.asset));
        for (i, s) in out.samples.iter_mut().enumerate() {
            s.id = i as u64;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn window_bars(&self, i: usize) -> &[Bar] {
        let s = &self.samples[i];
        let end = s.bar_index + 1;
        &self.assets[s.asset].bars[end - self.params.lookback..end]
    }

    pub fn window(&self, i: usize) -> Vec<f64> {
        featurize_window(self.window_bars(i))
    }

    pub fn snapshot(&self, i: usize) -> &Snapshot {
        let s = &self.samples[i];
        &self.assets[s.asset].snapshots[s.snapshot_index]
    }

    pub fn sample(&self, i: usize) -> AlignedSample {
        let s = self.samples[i];
        let snap = self.snapshot(i);
        AlignedSample {
            id: s.id,
            asset: self.assets[s.asset].name.clone(),
            time: s.time,
            window: self.window(i),
            embedding: snap.embedding.clone(),
            scalars: snap.scalars.clone(),
            tau: s.tau as f64,
            label: s.label,
            future_return: s.future_return,
        }
    }

    /// Verify that every input precedes and every label follows its
    /// decision time.
    pub fn check_causality(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let bars = &self.assets[s.asset].bars;
            let window_ok = self.window_bars(i).iter().all(|b| b.timestamp <= s.time);
            let snap_ok = self.snapshot(i).timestamp <= s.time;
            let label_ok = bars[s.bar_index + self.params.horizon].timestamp >= s.time;
            let lag_ok = (0..=self.params.tau_max).contains(&s.tau);
            if !(window_ok && snap_ok && label_ok && lag_ok) {
                return Err(DataError::Invalid(format!("sample {} violates causality", s.id)));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| DataError::Encoding(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        bincode::deserialize(bytes).map_err(|e| DataError::Encoding(e.to_string()))
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
        Ok(hex_digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetStats {
    pub samples: usize,
    pub mean_lag: f64,
    pub positivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub candidates: usize,
    pub dropped: usize,
    pub filtered: usize,
    pub mean_lag: f64,
    pub std_lag: f64,
    pub positivity: f64,
    pub per_asset: BTreeMap<String, AssetStats>,
}

impl CorpusStats {
    fn of(ds: &Dataset) -> Self {
        let n = ds.samples.len();
        let lags: Vec<f64> = ds.samples.iter().map(|s| s.tau as f64).collect();
        let (mean_lag, std_lag) = mean_std(&lags);
        let pos = |it: &mut dyn Iterator<Item = &SampleRef>| {
            let (k, m) = it.fold((0usize, 0usize), |(k, m), s| (k + s.label as usize, m + 1));
            if m == 0 {
                0.0
            } else {
                k as f64 / m as f64
            }
        };
        let per_asset = ds
            .assets
            .iter()
            .enumerate()
            .map(|(a, asset)| {
                let mine: Vec<&SampleRef> = ds.samples.iter().filter(|s| s.asset == a).collect();
                let lags: Vec<f64> = mine.iter().map(|s| s.tau as f64).collect();
                let stats = AssetStats {
                    samples: mine.len(),
                    mean_lag: mean_std(&lags).0,
                    positivity: pos(&mut mine.iter().copied()),
                };
                (asset.name.clone(), stats)
            })
            .collect();
        Self {
            samples: n,
            candidates: ds.candidates,
            dropped: ds.dropped,
            filtered: ds.filtered,
            mean_lag,
            std_lag,
            positivity: pos(&mut ds.samples.iter()),
            per_asset,
        }
    }

    /// Plain-text block with sample count, mean lag and positivity.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<12} {:>9} {:>14} {:>11}\n", "asset", "samples", "mean_lag_min", "positivity"));
        for (name, a) in &self.per_asset {
            s.push_str(&format!(
                "{:<12} {:>9} {:>14.2} {:>10.1}%\n",
                name,
                a.samples,
                a.mean_lag,
                100.0 * a.positivity
            ));
        }
        s.push_str(&format!(
            "{:<12} {:>9} {:>14.2} {:>10.1}%\n",
            "total",
            self.samples,
            self.mean_lag,
            100.0 * self.positivity
        ));
        s.push_str(&format!(
            "candidates {}, dropped (no snapshot within cap) {}, filtered {}, lag std {:.2}\n",
            self.candidates, self.dropped, self.filtered, self.std_lag
        ));
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Per-scalar z-score fitted on a training split. Scalars that were
/// constant in training map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WebNorm {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let first = rows.first().ok_or_else(|| DataError::Invalid("cannot fit on zero rows".into()))?;
        let k = first.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(DataError::Invalid("ragged scalar rows".into()));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..k)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(WEB_STD_FLOOR)
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Fit on the snapshots consumed by samples `range` of `ds`.
    pub fn fit_range(ds: &Dataset, range: std::ops::Range<usize>) -> Result<Self> {
        Self::fit(range.map(|i| ds.snapshot(i).scalars.as_slice()))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s <= WEB_STD_FLOOR { 0.0 } else { (v - m) / s })
            .collect()
    }
}
