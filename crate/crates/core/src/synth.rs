//! Synthetic coupled price/news corpus.
//!
//! Each news event carries a hidden direction. The price path realises a
//! drift in that direction shortly after the utility window closes, then
//! partially reverses it. A decision made while the event's lag lies in
//! `[window_lo, window_hi)` therefore sees the whole drift inside its label
//! horizon, earlier decisions see part of it and later ones mostly see the
//! reversal. The published direction agrees with the hidden one with
//! probability `(1 + rho) / 2`, i.e. correlation `rho`.

use crate::data::{write_ohlcv, write_web, AlignParams, Bar, DataError, Dataset, Snapshot, WebSchema, BAR_MINUTES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_bars: usize,
    /// Close time of the first bar, epoch minutes.
    pub start_minute: i64,
    pub sigma_bar: f64,
    pub drift: f64,
    pub events_per_day: f64,
    /// Evenly spaced events instead of a Poisson stream.
    pub regular_events: bool,
    /// Total log drift injected per event.
    pub event_jump: f64,
    /// Fraction of the drift given back afterwards.
    pub reversal_frac: f64,
    pub reversal_minutes: i64,
    pub window_lo: i64,
    pub window_hi: i64,
    /// Horizon (bars) the utility window is tuned for.
    pub horizon: usize,
    pub tau_max: i64,
    pub rho: f64,
    pub score_noise: f64,
    pub embed_noise: f64,
    pub embed_dim: usize,
    pub signal_dims: usize,
    pub distractor_dims: usize,
    pub distractor_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bars: 4800,
            start_minute: 28_401_120, // 2024-01-01T00:00Z
            sigma_bar: 0.003,
            drift: 0.0,
            events_per_day: 8.0,
            regular_events: false,
            event_jump: 0.009,
            reversal_frac: 0.5,
            reversal_minutes: 60,
            window_lo: 30,
            window_hi: 60,
            horizon: 4,
            tau_max: 180,
            rho: 0.6,
            score_noise: 0.25,
            embed_noise: 0.05,
            embed_dim: 384,
            signal_dims: 16,
            distractor_dims: 32,
            distractor_scale: 0.25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if !(0 <= self.window_lo && self.window_lo < self.window_hi && self.window_hi <= self.tau_max) {
            return bad(format!(
                "utility window [{}, {}) must satisfy 0 <= lo < hi <= tau_max ({})",
                self.window_lo, self.window_hi, self.tau_max
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.sigma_bar < 0.0 || self.score_noise < 0.0 || self.embed_noise < 0.0 || self.distractor_scale < 0.0 {
            return bad("noise scales must be non-negative".into());
        }
        if self.events_per_day < 0.0 || self.event_jump < 0.0 || self.reversal_minutes <= 0 {
            return bad("event rate and jump must be non-negative, reversal span positive".into());
        }
        if self.signal_dims + self.distractor_dims > self.embed_dim || self.signal_dims == 0 {
            return bad("signal and distractor dimensions must fit the embedding".into());
        }
        if self.n_bars < 2 {
            return bad("need at least two bars".into());
        }
        Ok(())
    }

    /// Minutes over which each event's drift is realised, starting at
    /// `event + window_hi`.
    pub fn drift_minutes(&self) -> i64 {
        (self.window_lo + BAR_MINUTES * self.horizon as i64 - self.window_hi).max(BAR_MINUTES)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: i64,
    /// Hidden direction driving the price path.
    pub truth: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub bars: Vec<Bar>,
    pub events: Vec<Event>,
    pub snapshots: Vec<Snapshot>,
    /// Published direction per snapshot.
    pub news_direction: Vec<i8>,
    pub schema: WebSchema,
}

fn event_times(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let start = cfg.start_minute - BAR_MINUTES - cfg.tau_max;
    let end = cfg.start_minute + BAR_MINUTES * (cfg.n_bars as i64 - 1);
    if cfg.events_per_day <= 0.0 {
        return Vec::new();
    }
    let mean_gap = 1440.0 / cfg.events_per_day;
    let mut out = Vec::new();
    if cfg.regular_events {
        let gap = mean_gap.round().max(1.0) as i64;
        let mut t = start - start.rem_euclid(gap);
        while t <= end {
            if t >= start {
                out.push(t);
            }
            t += gap;
        }
        return out;
    }
    let exp = Exp::new(1.0 / mean_gap).expect("positive rate");
    let mut t = start as f64;
    loop {
        t += exp.sample(rng);
        let m = t.round() as i64;
        if m > end {
            break;
        }
        if out.last() != Some(&m) {
            out.push(m);
        }
    }
    out
}

/// Overlap length of `(a0, a1]` and `(b0, b1]`.
fn overlap(a0: i64, a1: i64, b0: i64, b1: i64) -> i64 {
    (a1.min(b1) - a0.max(b0)).max(0)
}

/// Bars plus the hidden event stream.
pub fn gen_prices(cfg: &SynthConfig) -> Result<(Vec<Bar>, Vec<Event>), DataError> {
    cfg.validate()?;
    let mut ev_rng = cfg.rng(1);
    let times = event_times(cfg, &mut ev_rng);
    let events: Vec<Event> = times
        .iter()
        .map(|&time| Event {
            time,
            truth: if ev_rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();

    let n = cfg.n_bars;
    let bar_time = |i: usize| cfg.start_minute + BAR_MINUTES * i as i64;
    let mut inc = vec![0.0; n];
    let w = cfg.drift_minutes();
    for e in &events {
        let d = e.truth as f64 * cfg.event_jump;
        let (a0, a1) = (e.time + cfg.window_hi, e.time + cfg.window_hi + w);
        let (r0, r1) = (a1, a1 + cfg.reversal_minutes);
        let first = ((a0 - cfg.start_minute) / BAR_MINUTES).max(1) as usize;
        for (i, slot) in inc.iter_mut().enumerate().skip(first) {
            let (b0, b1) = (bar_time(i) - BAR_MINUTES, bar_time(i));
            if b0 >= r1 {
                break;
            }
            *slot += d * overlap(b0, b1, a0, a1) as f64 / w as f64;
            *slot -= cfg.reversal_frac * d * overlap(b0, b1, r0, r1) as f64 / cfg.reversal_minutes as f64;
        }
    }

    let mut rng = cfg.rng(2);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let vol = Normal::new(100f64.ln(), 0.5).expect("valid");
    let mut bars = Vec::with_capacity(n);
    let mut close = 100.0f64;
    for (i, d_event) in inc.iter().enumerate() {
        let open = close;
        if i > 0 {
            close = open * (cfg.drift + cfg.sigma_bar * noise.sample(&mut rng) + d_event).exp();
        } else {
            // The first bar still consumes draws so later bars do not depend
            // on the event stream's length.
            noise.sample(&mut rng);
        }
        let wick_hi = (0.5 * cfg.sigma_bar * noise.sample(&mut rng).abs()).exp();
        let wick_lo = (-0.5 * cfg.sigma_bar * noise.sample(&mut rng).abs()).exp();
        bars.push(Bar {
            timestamp: bar_time(i),
            open,
            high: open.max(close) * wick_hi,
            low: open.min(close) * wick_lo,
            close,
            volume: vol.sample(&mut rng).exp(),
        });
    }
    Ok((bars, events))
}

/// The fixed unit direction over the signal subspace.
fn signal_axis(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = cfg.rng(3);
    let raw: Vec<f64> = (0..cfg.signal_dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|x| x / norm).collect()
}

/// One snapshot per event, published at the event time.
pub fn gen_news(cfg: &SynthConfig, events: &[Event]) -> Result<(Vec<Snapshot>, Vec<i8>), DataError> {
    cfg.validate()?;
    let schema = WebSchema::default();
    let dir_k = schema.direction_index();
    let u = signal_axis(cfg);
    let mut rng = cfg.rng(4);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let agree = (1.0 + cfg.rho) / 2.0;
    let mut snaps = Vec::with_capacity(events.len());
    let mut dirs = Vec::with_capacity(events.len());
    for e in events {
        let news: i8 = if rng.gen_bool(agree) { e.truth } else { -e.truth };
        let s = news as f64;
        let mut scalars: Vec<f64> = (0..schema.scalars.len()).map(|_| unit.sample(&mut rng)).collect();
        scalars[dir_k] = (s + cfg.score_noise * unit.sample(&mut rng)).clamp(-1.0, 1.0);
        let nuisance = unit.sample(&mut rng) * cfg.distractor_scale;
        let mut embedding = Vec::with_capacity(cfg.embed_dim);
        for j in 0..cfg.embed_dim {
            let base = if j < cfg.signal_dims {
                s * u[j]
            } else if j < cfg.signal_dims + cfg.distractor_dims {
                nuisance
            } else {
                0.0
            };
            embedding.push(base + cfg.embed_noise * unit.sample(&mut rng));
        }
        snaps.push(Snapshot {
            timestamp: e.time,
            scalars,
            embedding,
        });
        dirs.push(news);
    }
    Ok((snaps, dirs))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, DataError> {
    let (bars, events) = gen_prices(cfg)?;
    let (snapshots, news_direction) = gen_news(cfg, &events)?;
    Ok(SynthCorpus {
        bars,
        events,
        snapshots,
        news_direction,
        schema: WebSchema::default(),
    })
}

/// Permute snapshot contents across events while keeping timestamps.
/// Returns the shuffled snapshots and the permutation (`out[i]` holds the
/// contents of `input[perm[i]]`).
pub fn shuffle_text(snapshots: &[Snapshot], seed: u64) -> (Vec<Snapshot>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..snapshots.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let out = perm
        .iter()
        .zip(snapshots)
        .map(|(&src, slot)| Snapshot {
            timestamp: slot.timestamp,
            scalars: snapshots[src].scalars.clone(),
            embedding: snapshots[src].embedding.clone(),
        })
        .collect();
    (out, perm)
}

impl SynthCorpus {
    pub fn with_shuffled_text(&self, seed: u64) -> Self {
        let (snapshots, perm) = shuffle_text(&self.snapshots, seed);
        Self {
            snapshots,
            news_direction: perm.iter().map(|&p| self.news_direction[p]).collect(),
            ..self.clone()
        }
    }

    pub fn dataset(&self, asset: &str, params: AlignParams) -> Result<Dataset, DataError> {
        Dataset::build(asset, self.bars.clone(), self.snapshots.clone(), self.schema.clone(), params, None)
    }

    /// Write `prices.csv`, `web.jsonl` and `schema.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let io = |p: &Path, e| crate::data::DataError::Io {
            path: p.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let p = dir.join("prices.csv");
        let f = std::fs::File::create(&p).map_err(|e| io(&p, e))?;
        write_ohlcv(&self.bars, std::io::BufWriter::new(f))?;
        let p = dir.join("web.jsonl");
        let f = std::fs::File::create(&p).map_err(|e| io(&p, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_web(&self.snapshots, &self.schema, &mut w)?;
        std::io::Write::flush(&mut w).map_err(|e| io(&p, e))?;
        let p = dir.join("schema.json");
        let text = serde_json::to_string_pretty(&self.schema).map_err(|e| DataError::Encoding(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| io(&p, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{align_bars, parse_ohlcv, parse_web};

    #[test]
    fn flat_market_without_events_is_constant() {
        let cfg = SynthConfig {
            n_bars: 200,
            sigma_bar: 0.0,
            events_per_day: 0.0,
            ..SynthConfig::default()
        };
        let (bars, events) = gen_prices(&cfg).unwrap();
        assert!(events.is_empty());
        for b in &bars {
            assert_eq!((b.open, b.high, b.low, b.close), (100.0, 100.0, 100.0, 100.0));
        }
    }

    #[test]
    fn bars_respect_ohlc_and_grid() {
        let c = generate(&SynthConfig { n_bars: 3000, ..SynthConfig::default() }).unwrap();
        for b in &c.bars {
            assert!(b.low <= b.open.min(b.close) && b.open.max(b.close) <= b.high);
            assert!(b.low > 0.0 && b.volume >= 0.0);
        }
        assert!(c.bars.windows(2).all(|w| w[1].timestamp - w[0].timestamp == BAR_MINUTES));
    }

    #[test]
    fn news_contract_and_negation() {
        let cfg = SynthConfig {
            n_bars: 500,
            embed_noise: 0.0,
            distractor_scale: 0.0,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.schema.scalars.len(), 13);
        assert!(c.snapshots.iter().all(|s| s.embedding.len() == 384 && s.scalars.len() == 13));
        let pos = c.news_direction.iter().position(|&d| d == 1).unwrap();
        let neg = c.news_direction.iter().position(|&d| d == -1).unwrap();
        for (a, b) in c.snapshots[pos].embedding.iter().zip(&c.snapshots[neg].embedding) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn perfect_news_predicts_window_returns() {
        let cfg = SynthConfig {
            n_bars: 9000,
            rho: 1.0,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        let times: Vec<i64> = c.bars.iter().map(|b| b.timestamp).collect();
        let h = cfg.horizon;
        let (mut agree, mut total) = (0, 0);
        for (e, &news) in c.events.iter().zip(&c.news_direction) {
            let rets: Vec<f64> = (0..times.len() - h)
                .filter(|&i| (cfg.window_lo..cfg.window_hi).contains(&(times[i] - e.time)))
                .map(|i| c.bars[i + h].close / c.bars[i].close - 1.0)
                .collect();
            if rets.is_empty() {
                continue;
            }
            total += 1;
            let m = rets.iter().sum::<f64>() / rets.len() as f64;
            agree += usize::from(m * news as f64 > 0.0);
        }
        assert!(total >= 500, "{total}");
        assert!(agree as f64 >= 0.8 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn deterministic_and_files_roundtrip() {
        let cfg = SynthConfig { n_bars: 300, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let bars = parse_ohlcv(std::fs::File::open(dir.path().join("prices.csv")).unwrap()).unwrap();
        assert_eq!(bars.bars, a.bars);
        assert!(bars.gaps.is_empty());
        let web = parse_web(std::fs::File::open(dir.path().join("web.jsonl")).unwrap(), &a.schema).unwrap();
        assert!(web.rejections.is_empty());
        assert_eq!(web.snapshots, a.snapshots);
    }

    #[test]
    fn shuffle_is_a_seeded_bijection() {
        let c = generate(&SynthConfig { n_bars: 800, ..SynthConfig::default() }).unwrap();
        let (s1, p1) = shuffle_text(&c.snapshots, 3);
        let (_, p2) = shuffle_text(&c.snapshots, 3);
        assert_eq!(p1, p2);
        let mut sorted = p1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..c.snapshots.len()).collect::<Vec<_>>());
        for (i, s) in s1.iter().enumerate() {
            assert_eq!(s.timestamp, c.snapshots[i].timestamp);
            assert_eq!(s.embedding, c.snapshots[p1[i]].embedding);
        }
    }

    #[test]
    fn regular_events_give_bounded_lags() {
        let cfg = SynthConfig {
            n_bars: 2000,
            events_per_day: 12.0,
            regular_events: true,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        let recs = align_bars(&c.bars, &c.snapshots, 180, 4, 0).unwrap();
        let max = recs.iter().map(|r| r.tau).max().unwrap();
        let min = recs.iter().map(|r| r.tau).min().unwrap();
        assert_eq!((min, max), (0, 105));
    }
}
