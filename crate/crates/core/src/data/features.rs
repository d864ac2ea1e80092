//! Per-window price features.
//!
//! Each window row carries the five raw channels z-scored over the window
//! followed by eleven technical features. Look-backs that would reach
//! before the first row of the window are truncated to the window start,
//! so the output is a pure function of the window.

use super::Bar;

pub const PRICE_FEATURES: usize = 16;
const STD_FLOOR: f64 = 1e-8;

pub const FEATURE_NAMES: [&str; PRICE_FEATURES] = [
    "open_z",
    "high_z",
    "low_z",
    "close_z",
    "volume_z",
    "log_return_1",
    "momentum_4",
    "momentum_16",
    "volatility_16",
    "range",
    "range_position",
    "body_ratio",
    "log_volume_z",
    "rsi_14",
    "ema_12_gap",
    "ema_26_gap",
];

fn zscore(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    xs.iter().map(|x| (x - mean) / std).collect()
}

fn ema(closes: &[f64], span: usize) -> Vec<f64> {
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(closes.len());
    let mut e = closes[0];
    for &c in closes {
        e = alpha * c + (1.0 - alpha) * e;
        out.push(e);
    }
    out
}

/// Wilder RSI rescaled to [-1, 1]; 0 when there has been no movement.
fn rsi(closes: &[f64], period: usize) -> Vec<f64> {
    let p = period as f64;
    let (mut gain, mut loss) = (0.0, 0.0);
    let mut out = vec![0.0; closes.len()];
    for i in 1..closes.len() {
        let d = closes[i] - closes[i - 1];
        let (g, l) = (d.max(0.0), (-d).max(0.0));
        if i <= period {
            gain += (g - gain) / i as f64;
            loss += (l - loss) / i as f64;
        } else {
            gain = (gain * (p - 1.0) + g) / p;
            loss = (loss * (p - 1.0) + l) / p;
        }
        let total = gain + loss;
        out[i] = if total > 0.0 { (gain - loss) / total } else { 0.0 };
    }
    out
}

/// Turn `L` bars into an `L × 16` row-major feature matrix.
pub fn featurize_window(bars: &[Bar]) -> Vec<f64> {
    let n = bars.len();
    assert!(n > 0, "empty window");
    let chan = |f: fn(&Bar) -> f64| bars.iter().map(f).collect::<Vec<f64>>();
    let raw = [
        zscore(&chan(|b| b.open)),
        zscore(&chan(|b| b.high)),
        zscore(&chan(|b| b.low)),
        zscore(&chan(|b| b.close)),
        zscore(&chan(|b| b.volume)),
    ];
    let close = chan(|b| b.close);
    let log_c: Vec<f64> = close.iter().map(|c| c.ln()).collect();
    let ret1: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { log_c[i] - log_c[i - 1] }).collect();
    let mom = |k: usize, i: usize| log_c[i] - log_c[i.saturating_sub(k)];
    let log_vol_z = zscore(&chan(|b| b.volume.ln_1p()));
    let rsi14 = rsi(&close, 14);
    let ema12 = ema(&close, 12);
    let ema26 = ema(&close, 26);

    let mut out = Vec::with_capacity(n * PRICE_FEATURES);
    for i in 0..n {
        let b = &bars[i];
        out.extend(raw.iter().map(|c| c[i]));
        let lo = i.saturating_sub(15).max(1);
        let vol = if i >= 2 {
            let r = &ret1[lo..=i];
            let m = r.iter().sum::<f64>() / r.len() as f64;
            (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
        } else {
            0.0
        };
        let span = (b.high - b.low).max(STD_FLOOR);
        out.extend([
            ret1[i],
            mom(4, i),
            mom(16, i),
            vol,
            (b.high - b.low) / b.close,
            (b.close - b.low) / span,
            (b.close - b.open) / span,
            log_vol_z[i],
            rsi14[i],
            ema12[i] / b.close - 1.0,
            ema26[i] / b.close - 1.0,
        ]);
    }
    out
}
