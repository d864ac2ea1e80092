use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bar(ts: i64, close: f64) -> Bar {
    Bar {
        timestamp: ts,
        open: close,
        high: close,
        low: close,
        close,
        volume: 1.0,
    }
}

fn snap(ts: i64, dir: f64) -> Snapshot {
    let mut scalars = vec![0.0; WEB_SCALARS];
    scalars[0] = dir;
    Snapshot {
        timestamp: ts,
        scalars,
        embedding: vec![0.0; 4],
    }
}

fn grid_csv(n: usize, skip: Option<usize>) -> String {
    let mut s = String::from("timestamp,open,high,low,close,volume\n");
    for i in 0..n {
        if Some(i) == skip {
            continue;
        }
        s.push_str(&format!("{},100,101,99,100.5,10\n", 1_700_000_100 + i as i64 * 900));
    }
    s
}

#[test]
fn ohlcv_three_rows_sorted() {
    let csv = "timestamp,open,high,low,close,volume\n\
               1700001000,1,2,0.5,1.5,3\n\
               1700000100,1,2,0.5,1.5,3\n\
               2023-11-14T22:45:00Z,1,2,0.5,1.5,3\n";
    let s = parse_ohlcv(csv.as_bytes()).unwrap();
    assert_eq!(s.bars.len(), 3);
    assert!(s.bars.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    assert_eq!(s.bars[0].timestamp, 1_700_000_100 / 60);
}

#[test]
fn ohlcv_rejects_high_below_low_with_line() {
    let csv = "timestamp,open,high,low,close,volume\n\
               1700000100,1,2,0.5,1.5,3\n\
               1700001000,1,0.4,0.5,1.5,3\n";
    match parse_ohlcv(csv.as_bytes()) {
        Err(DataError::Rows(errs)) => {
            assert_eq!(errs.len(), 1);
            assert_eq!(errs[0].line, 3);
            assert!(errs[0].reason.contains("OHLC"));
        }
        other => panic!("expected row rejection, got {other:?}"),
    }
}

#[test]
fn ohlcv_header_and_duplicate_errors() {
    let bad = "time,open,high,low,close,volume\n";
    assert!(matches!(parse_ohlcv(bad.as_bytes()), Err(DataError::Header { .. })));
    let dup = "timestamp,open,high,low,close,volume\n\
               1700000100,1,2,0.5,1.5,3\n\
               1700000100,1,2,0.5,1.5,3\n";
    assert!(matches!(parse_ohlcv(dup.as_bytes()), Err(DataError::Duplicate { .. })));
}

#[test]
fn ohlcv_missing_bar_is_one_gap() {
    let s = parse_ohlcv(grid_csv(100, Some(40)).as_bytes()).unwrap();
    assert_eq!(s.bars.len(), 99);
    assert_eq!(s.gaps.len(), 1);
    assert_eq!(s.gaps[0].missing, 1);
    assert!(!s.gaps[0].off_grid);
    let full = parse_ohlcv(grid_csv(100, None).as_bytes()).unwrap();
    assert!(full.gaps.is_empty());
}

#[test]
fn timestamp_formats() {
    assert_eq!(parse_timestamp("600").unwrap(), 10);
    assert_eq!(parse_timestamp("1970-01-01T00:10:00Z").unwrap(), 10);
    assert_eq!(parse_timestamp("1970-01-01 00:10:00").unwrap(), 10);
    assert_eq!(parse_timestamp("1970-01-01T02:10:00+02:00").unwrap(), 10);
    assert!(parse_timestamp("61").is_err());
    assert!(parse_timestamp("yesterday").is_err());
}

#[test]
fn ohlcv_write_parse_roundtrip() {
    let bars = vec![
        Bar { timestamp: 100, open: 1.1, high: 1.3, low: 0.9, close: 1.2, volume: 0.3 },
        Bar { timestamp: 115, open: 1.2, high: 1.25, low: 1.0 / 3.0, close: 1.0, volume: 7.0 },
    ];
    let mut buf = Vec::new();
    write_ohlcv(&bars, &mut buf).unwrap();
    assert_eq!(parse_ohlcv(buf.as_slice()).unwrap().bars, bars);
}

fn web_line(ts: i64, schema: &WebSchema, emb_len: usize, drop_field: Option<&str>) -> String {
    let scalars: serde_json::Map<String, serde_json::Value> = schema
        .scalars
        .iter()
        .filter(|n| Some(n.as_str()) != drop_field)
        .map(|n| (n.clone(), serde_json::Value::from(0.5)))
        .collect();
    serde_json::json!({"timestamp": ts * 60, "scalars": scalars, "embedding": vec![0.1; emb_len]}).to_string()
}

#[test]
fn web_valid_and_short_embedding() {
    let schema = WebSchema::default();
    let ok = web_line(10, &schema, EMBED_DIM, None);
    let w = parse_web(ok.as_bytes(), &schema).unwrap();
    assert_eq!(w.snapshots.len(), 1);
    assert_eq!(w.snapshots[0].timestamp, 10);
    let short = web_line(10, &schema, 383, None);
    let w = parse_web(short.as_bytes(), &schema).unwrap();
    assert!(w.snapshots.is_empty());
    assert!(w.rejections[0].reason.contains("383"));
}

#[test]
fn web_thousand_lines_three_malformed() {
    let schema = WebSchema::default();
    let mut text = String::new();
    for i in 0..1000 {
        let line = match i {
            17 => web_line(i, &schema, 383, None),
            500 => web_line(i, &schema, EMBED_DIM, Some("noise_07")),
            900 => "{not json".to_string(),
            _ => web_line(i, &schema, EMBED_DIM, None),
        };
        text.push_str(&line);
        text.push('\n');
    }
    let w = parse_web(text.as_bytes(), &schema).unwrap();
    assert_eq!(w.snapshots.len(), 997);
    let lines: Vec<u64> = w.rejections.iter().map(|r| r.line).collect();
    assert_eq!(lines, vec![18, 501, 901]);
    assert!(w.rejections[1].reason.contains("noise_07"));
}

#[test]
fn web_roundtrip_and_schema_checks() {
    let schema = WebSchema::default();
    let snaps = vec![Snapshot {
        timestamp: 42,
        scalars: (0..13).map(|i| i as f64 * 0.1 - 0.3).collect(),
        embedding: (0..EMBED_DIM).map(|i| (i as f64).sin()).collect(),
    }];
    let mut buf = Vec::new();
    write_web(&snaps, &schema, &mut buf).unwrap();
    assert_eq!(parse_web(buf.as_slice(), &schema).unwrap().snapshots, snaps);

    let mut dup = schema.clone();
    dup.scalars[3] = dup.scalars[4].clone();
    assert!(dup.validate().is_err());
    let mut short = schema.clone();
    short.scalars.pop();
    assert!(short.validate().is_err());
}

#[test]
fn align_picks_latest_predecessor() {
    let times = [900, 980];
    assert_eq!(latest_within(&times, 1000, 180), Some(1));
    assert_eq!(latest_within(&[800], 1000, 180), None);
    assert_eq!(latest_within(&[820], 1000, 180), Some(0));
    assert_eq!(latest_within(&[1001], 1000, 180), None);
}

#[test]
fn align_event_drops_stale_and_rejects_infeasible() {
    let bars: Vec<Bar> = (0..10).map(|i| bar(i * 15, 100.0 + i as f64)).collect();
    let p = AlignParams { tau_max: 180, lookback: 3, horizon: 2 };
    let a = align_event(&bars, &[snap(-200 + 30, 1.0)], p).unwrap();
    // Candidates are bars 2..=7 (t = 30..=105); the only snapshot is 200
    // minutes before the first of them.
    assert_eq!(a.candidates, 6);
    assert!(a.samples.is_empty());
    assert_eq!(a.dropped, 6);

    let a = align_event(&bars, &[snap(20, 1.0), snap(31, 1.0)], p).unwrap();
    assert_eq!(a.samples[0].time, 30);
    assert_eq!(a.samples[0].tau, 10);
    assert_eq!(a.samples[1].tau, 14);

    let e = align_event(&bars[..4], &[], p);
    assert!(matches!(e, Err(DataError::Infeasible(_))));
    let empty = align_event(&bars, &[], p).unwrap();
    assert!(empty.samples.is_empty());
}

fn brute_force_pairs(bars: &[Bar], snaps: &[Snapshot], tau_max: i64, lo: usize, hi: usize) -> Vec<(usize, usize, i64)> {
    let mut out = Vec::new();
    for i in lo..hi {
        let t = bars[i].timestamp;
        let mut best: Option<usize> = None;
        for (j, s) in snaps.iter().enumerate() {
            if s.timestamp <= t && t - s.timestamp <= tau_max {
                if best.map_or(true, |b| snaps[b].timestamp < s.timestamp) {
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            out.push((i, j, t - snaps[j].timestamp));
        }
    }
    out
}

fn random_instance(rng: &mut ChaCha8Rng, n_bars: usize, n_snaps: usize) -> (Vec<Bar>, Vec<Snapshot>, i64) {
    let bars: Vec<Bar> = (0..n_bars).map(|i| bar(i as i64 * 15, 100.0 + rng.gen_range(-1.0..1.0))).collect();
    let span = n_bars as i64 * 15;
    let mut times: Vec<i64> = (0..n_snaps).map(|_| rng.gen_range(-200..span)).collect();
    times.sort();
    times.dedup();
    // Land some snapshots exactly tau_max before a bar.
    let tau_max = 15 * rng.gen_range(0..13) as i64;
    let snaps = times.iter().map(|&t| snap(t, rng.gen_range(-1.0..1.0))).collect();
    (bars, snaps, tau_max)
}

#[test]
fn align_event_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (bars, snaps, tau_max) = random_instance(&mut rng, 500, 50);
        let p = AlignParams { tau_max, lookback: 64, horizon: 4 };
        let got: Vec<_> = align_event(&bars, &snaps, p)
            .unwrap()
            .samples
            .iter()
            .map(|s| (s.bar_index, s.snapshot_index, s.tau))
            .collect();
        assert_eq!(got, brute_force_pairs(&bars, &snaps, tau_max, 63, 496));
    }
}

#[test]
fn align_bars_lag_ranges() {
    let bars: Vec<Bar> = (0..2000).map(|i| bar(i * 15, 100.0)).collect();
    let dense: Vec<Snapshot> = (0..2000).map(|i| snap(i * 15 - 7, 0.5)).collect();
    let recs = align_bars(&bars, &dense, 180, 4, 0).unwrap();
    assert!(recs.iter().all(|r| (0..15).contains(&r.tau)));

    let sparse: Vec<Snapshot> = (0..300).map(|i| snap(i * 120 - 3, 0.5)).collect();
    let recs = align_bars(&bars, &sparse, 180, 4, 0).unwrap();
    assert!(recs.iter().all(|r| (0..120).contains(&r.tau)));
    // 120-minute cadence vs 15-minute bars: 8 bar phases, each equally often.
    let mut hist = [0usize; 4];
    for r in &recs {
        hist[(r.tau / 30) as usize] += 1;
    }
    let n = recs.len() as f64;
    assert!(hist.iter().all(|&h| (h as f64 / n - 0.25).abs() < 0.01), "{hist:?}");
}

#[test]
fn align_bars_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (bars, snaps, tau_max) = random_instance(&mut rng, 300, 40);
        let got: Vec<_> = align_bars(&bars, &snaps, tau_max, 4, 0)
            .unwrap()
            .iter()
            .map(|r| (r.bar_index, r.tau))
            .collect();
        let want: Vec<_> = brute_force_pairs(&bars, &snaps, tau_max, 0, 296)
            .into_iter()
            .map(|(i, _, tau)| (i, tau))
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn label_cases() {
    let bars = vec![bar(0, 100.0), bar(15, 100.5), bar(30, 101.0), bar(45, 100.0)];
    let (y, r) = compute_label(&bars, 0, 2).unwrap();
    assert_eq!(y, 1);
    assert!((r - 0.01).abs() < 1e-15);
    assert_eq!(compute_label(&bars, 0, 3).unwrap(), (0, 0.0));
    assert!(compute_label(&bars, 2, 2).is_none());

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut c = 100.0;
    let path: Vec<Bar> = (0..300)
        .map(|i| {
            c *= 1.0 + rng.gen_range(-0.01..0.01);
            bar(i * 15, c)
        })
        .collect();
    for i in 0..296 {
        let (y, r) = compute_label(&path, i, 4).unwrap();
        let want = path[i + 4].close / path[i].close - 1.0;
        assert!((r - want).abs() < 1e-12);
        assert_eq!(y == 1, path[i + 4].close > path[i].close);
    }
}

#[test]
fn featurize_constant_and_ramp() {
    let flat: Vec<Bar> = (0..64).map(|i| bar(i * 15, 50.0)).collect();
    let f = featurize_window(&flat);
    assert_eq!(f.len(), 64 * PRICE_FEATURES);
    for row in f.chunks(PRICE_FEATURES) {
        assert!(row[..4].iter().all(|&v| v == 0.0));
        assert!(row[5..9].iter().all(|&v| v == 0.0));
        assert_eq!(row[13], 0.0);
    }

    // Geometric ramp: constant log return.
    let ramp: Vec<Bar> = (0..64).map(|i| bar(i * 15, 10.0 * 1.01f64.powi(i as i32))).collect();
    let f = featurize_window(&ramp);
    for row in f.chunks(PRICE_FEATURES).skip(1) {
        assert!((row[5] - 1.01f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn featurize_zscores_are_standardised_and_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut c = 100.0;
    let w: Vec<Bar> = (0..64)
        .map(|i| {
            let o = c;
            c *= 1.0 + rng.gen_range(-0.01..0.01);
            Bar {
                timestamp: i * 15,
                open: o,
                high: o.max(c) * 1.002,
                low: o.min(c) * 0.998,
                close: c,
                volume: rng.gen_range(1.0..10.0),
            }
        })
        .collect();
    let f = featurize_window(&w);
    assert!(f.iter().all(|v| v.is_finite()));
    for ch in 0..5 {
        let col: Vec<f64> = f.chunks(PRICE_FEATURES).map(|r| r[ch]).collect();
        let m = col.iter().sum::<f64>() / 64.0;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-10 && (v.sqrt() - 1.0).abs() < 1e-10);
    }
    assert_eq!(f, featurize_window(&w));
}

#[test]
fn web_norm_cases() {
    let n = WebNorm::fit([[0.0].as_slice(), [2.0].as_slice()]).unwrap();
    assert_eq!(n.apply(&[1.0]), vec![0.0]);
    let n = WebNorm { mean: vec![1.0], std: vec![1.0] };
    assert_eq!(n.apply(&[4.0]), vec![3.0]);
    let n = WebNorm::fit([[5.0].as_slice(), [5.0].as_slice()]).unwrap();
    assert_eq!(n.apply(&[9.0]), vec![0.0]);
}

fn toy_dataset(seed: u64, n_bars: usize) -> Dataset {
    named_toy("TOY", seed, n_bars)
}

fn named_toy(name: &str, seed: u64, n_bars: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = 100.0;
    let bars: Vec<Bar> = (0..n_bars)
        .map(|i| {
            c *= 1.0 + rng.gen_range(-0.01..0.01);
            bar(i as i64 * 15, c)
        })
        .collect();
    let snaps: Vec<Snapshot> = (0..n_bars / 4)
        .map(|i| {
            let mut s = snap(i as i64 * 60 - rng.gen_range(0..30), rng.gen_range(-1.0..1.0));
            for v in s.scalars.iter_mut().skip(1) {
                *v = rng.gen_range(-3.0..3.0);
            }
            s
        })
        .collect();
    Dataset::build(name, bars, snaps, WebSchema::default(), AlignParams::default(), None).unwrap()
}

#[test]
fn web_norm_per_fold_matches_recomputation() {
    let ds = toy_dataset(15, 600);
    for start in [0usize, 50, 200] {
        let range = start..start + 100;
        let norm = WebNorm::fit_range(&ds, range.clone()).unwrap();
        for k in 0..WEB_SCALARS {
            let xs: Vec<f64> = range.clone().map(|i| ds.snapshot(i).scalars[k]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((norm.mean[k] - m).abs() < 1e-12);
        }
    }
}

#[test]
fn dataset_causality_stats_and_hash() {
    let ds = toy_dataset(16, 800);
    ds.check_causality().unwrap();
    let st = ds.stats();
    assert_eq!(st.samples, ds.len());
    assert_eq!(st.candidates, st.samples + st.dropped);
    assert!(st.render().contains("mean_lag_min"));
    let bytes = ds.to_bytes().unwrap();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.hash().unwrap(), toy_dataset(16, 800).hash().unwrap());
    let s = ds.sample(3);
    assert_eq!(s.window.len(), 64 * PRICE_FEATURES);
    assert_eq!(s.tau, ds.samples[3].tau as f64);
}

#[test]
fn strength_filter_and_pooling() {
    let ds = toy_dataset(17, 600);
    let a = &ds.assets[0];
    let f = Dataset::build(
        "TOY",
        a.bars.clone(),
        a.snapshots.clone(),
        WebSchema::default(),
        AlignParams::default(),
        Some(("direction_score", 0.2)),
    )
    .unwrap();
    assert_eq!(f.len() + f.filtered, ds.len());
    assert!((0..f.len()).all(|i| f.snapshot(i).scalars[0].abs() >= 0.2));

    let other = named_toy("ALT", 18, 600);
    let pooled = Dataset::pool(vec![ds.clone(), other.clone()]).unwrap();
    assert_eq!(pooled.len(), ds.len() + other.len());
    assert!(pooled.samples.windows(2).all(|w| w[0].time <= w[1].time));
    assert_eq!(pooled.stats().per_asset.len(), 2);
    pooled.check_causality().unwrap();
}

proptest! {
    #[test]
    fn tau_within_cap_and_counts_balance(seed in 0u64..1000, tau_max in 0i64..240) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bars, snaps, _) = random_instance(&mut rng, 120, 20);
        let p = AlignParams { tau_max, lookback: 8, horizon: 4 };
        let a = align_event(&bars, &snaps, p).unwrap();
        prop_assert_eq!(a.samples.len() + a.dropped, a.candidates);
        prop_assert!(a.samples.iter().all(|s| s.tau >= 0 && s.tau <= tau_max));
    }
}
