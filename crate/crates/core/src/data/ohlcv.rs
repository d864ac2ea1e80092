use super::{io_err, DataError, LineError, Result};
use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const BAR_MINUTES: i64 = 15;
const HEADER: [&str; 6] = ["timestamp", "open", "high", "low", "close", "volume"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// Close time in epoch minutes.
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn raw(&self) -> [f64; 5] {
        [self.open, self.high, self.low, self.close, self.volume]
    }

    fn check(&self) -> std::result::Result<(), String> {
        let vals = self.raw();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.open <= 0.0 || self.high <= 0.0 || self.low <= 0.0 || self.close <= 0.0 {
            return Err("prices must be positive".into());
        }
        if self.volume < 0.0 {
            return Err("negative volume".into());
        }
        let (lo, hi) = (self.open.min(self.close), self.open.max(self.close));
        if self.low > lo || hi > self.high {
            return Err(format!(
                "OHLC ordering violated (open {}, high {}, low {}, close {})",
                self.open, self.high, self.low, self.close
            ));
        }
        Ok(())
    }
}

/// A run of missing bars between two consecutive timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub after: i64,
    pub before: i64,
    /// Whole bars missing; zero when the spacing is off-grid.
    pub missing: usize,
    pub off_grid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub bars: Vec<Bar>,
    pub gaps: Vec<Gap>,
}

/// Parse epoch seconds (integer) or an ISO-8601 / RFC 3339 date-time into
/// epoch minutes. Naive date-times are taken as UTC.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    let bad = || DataError::Timestamp(s.to_string());
    if let Ok(secs) = s.parse::<i64>() {
        return if secs % 60 == 0 { Ok(secs / 60) } else { Err(bad()) };
    }
    let secs = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.timestamp()
    } else {
        ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .ok_or_else(bad)?
            .and_utc()
            .timestamp()
    };
    if secs % 60 != 0 {
        return Err(bad());
    }
    Ok(secs / 60)
}

pub fn load_ohlcv(path: &Path) -> Result<BarSeries> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_ohlcv(file)
}

/// Read, validate and sort a bar CSV. Every invalid row is reported; a
/// duplicate timestamp is a hard error; irregular spacing is returned as
/// gaps rather than rejected.
pub fn parse_ohlcv<R: Read>(reader: R) -> Result<BarSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DataError::Header {
            expected: HEADER.join(","),
            found: e.to_string(),
        })?
        .clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(DataError::Header {
            expected: HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut rows: Vec<(u64, Bar)> = Vec::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(LineError { line, reason: e.to_string() });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        match parse_row(&rec) {
            Ok(bar) => match bar.check() {
                Ok(()) => rows.push((line, bar)),
                Err(reason) => errors.push(LineError { line, reason }),
            },
            Err(reason) => errors.push(LineError { line, reason }),
        }
    }
    if !errors.is_empty() {
        return Err(DataError::Rows(errors));
    }

    rows.sort_by_key(|(_, b)| b.timestamp);
    for w in rows.windows(2) {
        if w[0].1.timestamp == w[1].1.timestamp {
            return Err(DataError::Duplicate {
                timestamp: w[1].1.timestamp,
                line: w[0].0.max(w[1].0),
            });
        }
    }
    let bars: Vec<Bar> = rows.into_iter().map(|(_, b)| b).collect();
    let gaps = find_gaps(&bars);
    Ok(BarSeries { bars, gaps })
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<Bar, String> {
    if rec.len() != HEADER.len() {
        return Err(format!("expected {} fields, found {}", HEADER.len(), rec.len()));
    }
    let timestamp = parse_timestamp(&rec[0]).map_err(|e| e.to_string())?;
    let num = |i: usize| -> std::result::Result<f64, String> {
        rec[i].parse::<f64>().map_err(|_| format!("{}: not a number `{}`", HEADER[i], &rec[i]))
    };
    Ok(Bar {
        timestamp,
        open: num(1)?,
        high: num(2)?,
        low: num(3)?,
        close: num(4)?,
        volume: num(5)?,
    })
}

fn find_gaps(bars: &[Bar]) -> Vec<Gap> {
    bars.windows(2)
        .filter_map(|w| {
            let dt = w[1].timestamp - w[0].timestamp;
            if dt == BAR_MINUTES {
                return None;
            }
            let off_grid = dt % BAR_MINUTES != 0;
            Some(Gap {
                after: w[0].timestamp,
                before: w[1].timestamp,
                missing: if off_grid { 0 } else { (dt / BAR_MINUTES - 1) as usize },
                off_grid,
            })
        })
        .collect()
}

/// Write bars with epoch-second timestamps.
pub fn write_ohlcv<W: Write>(bars: &[Bar], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let enc = |e: csv::Error| DataError::Encoding(e.to_string());
    w.write_record(HEADER).map_err(enc)?;
    for b in bars {
        w.write_record(&[
            (b.timestamp * 60).to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])
        .map_err(enc)?;
    }
    w.flush().map_err(|e| DataError::Encoding(e.to_string()))?;
    Ok(())
}
