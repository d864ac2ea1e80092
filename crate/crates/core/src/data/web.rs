use super::ohlcv::parse_timestamp;
use super::{io_err, DataError, LineError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const WEB_SCALARS: usize = 13;
pub const EMBED_DIM: usize = 384;

/// Ordered names of the scalar fields, one of which is the directional
/// score used by the lag analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebSchema {
    pub scalars: Vec<String>,
    pub direction: String,
}

impl Default for WebSchema {
    fn default() -> Self {
        let mut scalars = vec!["direction_score".to_string()];
        scalars.extend((1..WEB_SCALARS).map(|i| format!("noise_{i:02}")));
        Self {
            scalars,
            direction: "direction_score".into(),
        }
    }
}

impl WebSchema {
    pub fn validate(&self) -> Result<()> {
        if self.scalars.len() != WEB_SCALARS {
            return Err(DataError::Schema(format!(
                "expected {WEB_SCALARS} scalar names, got {}",
                self.scalars.len()
            )));
        }
        let unique: BTreeSet<&str> = self.scalars.iter().map(String::as_str).collect();
        if unique.len() != self.scalars.len() {
            return Err(DataError::Schema("scalar names are not unique".into()));
        }
        self.index_of(&self.direction)?;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.scalars
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| DataError::Schema(format!("field `{name}` is not in the schema")))
    }

    pub fn direction_index(&self) -> usize {
        self.index_of(&self.direction).expect("validated schema")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let schema: Self = serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Publication time in epoch minutes.
    pub timestamp: i64,
    /// Scalars in schema order.
    pub scalars: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WebLoad {
    pub snapshots: Vec<Snapshot>,
    pub rejections: Vec<LineError>,
}

pub fn load_web(path: &Path, schema: &WebSchema) -> Result<WebLoad> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_web(file, schema)
}

/// Parse JSON lines into snapshots. Malformed lines are rejected
/// individually; a repeated timestamp rejects the later line.
pub fn parse_web<R: Read>(reader: R, schema: &WebSchema) -> Result<WebLoad> {
    schema.validate()?;
    let mut snapshots = Vec::new();
    let mut rejections = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| DataError::Io {
            path: "<web input>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, schema) {
            Ok(s) if !seen.insert(s.timestamp) => rejections.push(LineError {
                line: line_no,
                reason: format!("duplicate timestamp {}", s.timestamp),
            }),
            Ok(s) => snapshots.push(s),
            Err(reason) => rejections.push(LineError { line: line_no, reason }),
        }
    }
    snapshots.sort_by_key(|s| s.timestamp);
    Ok(WebLoad { snapshots, rejections })
}

fn parse_line(line: &str, schema: &WebSchema) -> std::result::Result<Snapshot, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let ts = match v.get("timestamp") {
        Some(Value::Number(n)) => {
            let secs = n.as_i64().ok_or("timestamp must be integral epoch seconds")?;
            parse_timestamp(&secs.to_string()).map_err(|e| e.to_string())?
        }
        Some(Value::String(s)) => parse_timestamp(s).map_err(|e| e.to_string())?,
        _ => return Err("missing timestamp".into()),
    };
    let obj = v
        .get("scalars")
        .and_then(Value::as_object)
        .ok_or("missing `scalars` object")?;
    let mut scalars = Vec::with_capacity(WEB_SCALARS);
    for name in &schema.scalars {
        let x = obj
            .get(name)
            .ok_or_else(|| format!("missing schema field `{name}`"))?
            .as_f64()
            .ok_or_else(|| format!("field `{name}` is not a number"))?;
        scalars.push(x);
    }
    let emb = v
        .get("embedding")
        .and_then(Value::as_array)
        .ok_or("missing `embedding` array")?;
    if emb.len() != EMBED_DIM {
        return Err(format!("embedding has length {}, expected {EMBED_DIM}", emb.len()));
    }
    let embedding: Vec<f64> = emb
        .iter()
        .map(|x| x.as_f64().ok_or("embedding entry is not a number"))
        .collect::<std::result::Result<_, _>>()?;
    if scalars.iter().chain(&embedding).any(|x| !x.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok(Snapshot {
        timestamp: ts,
        scalars,
        embedding,
    })
}

/// Write snapshots as JSON lines with epoch-second timestamps.
pub fn write_web<W: Write>(snapshots: &[Snapshot], schema: &WebSchema, mut out: W) -> Result<()> {
    for s in snapshots {
        let scalars: serde_json::Map<String, Value> = schema
            .scalars
            .iter()
            .zip(&s.scalars)
            .map(|(k, v)| (k.clone(), Value::from(*v)))
            .collect();
        let obj = serde_json::json!({
            "timestamp": s.timestamp * 60,
            "scalars": scalars,
            "embedding": s.embedding,
        });
        writeln!(out, "{obj}").map_err(|e| DataError::Encoding(e.to_string()))?;
    }
    Ok(())
}
