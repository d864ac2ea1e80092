//! Experiment runner: every (kind, seed, fold) block, optionally persisted
//! and resumable through an append-only manifest.

use super::train::{predict_fold, train_on, EpochRecord, FoldData, FoldOutcome, TrainConfig};
use super::{io_err, make_folds, FoldSpec, ProtocolConfig, Result, WalkError};
use crate::data::{Dataset, WebNorm, PRICE_FEATURES};
use crate::metrics::{read_predictions, write_predictions, PredictionRow};
use crate::models::{ModelConfig, ModelKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

const LOG: &str = "manifest.jsonl";
const SUMMARY: &str = "manifest.json";
const HEADER: &str = "run.json";
const COMBINED: &str = "predictions.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: ProtocolConfig,
    pub kinds: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// Template; kind, seed and input widths are filled in per block.
    pub model: ModelConfig,
    /// Template; the seed is derived per block.
    pub train: TrainConfig,
    pub jobs: usize,
    /// Use only the first `n` folds.
    pub max_folds: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

impl ExperimentSpec {
    pub fn new(protocol: ProtocolConfig, kinds: Vec<ModelKind>, seeds: Vec<u64>) -> Self {
        Self {
            protocol,
            kinds,
            seeds,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            jobs: 1,
            max_folds: None,
            out_dir: None,
            save_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStatus {
    Trained,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub kind: String,
    pub seed: u64,
    pub fold: usize,
    pub status: BlockStatus,
    pub reason: Option<String>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub predictions: usize,
    pub gate_mean: Option<f64>,
    pub curve: Vec<EpochRecord>,
    pub prediction_file: Option<String>,
    pub checkpoint: Option<String>,
}

impl BlockRecord {
    fn key(&self) -> (String, u64, usize) {
        (self.kind.clone(), self.seed, self.fold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub protocol: ProtocolConfig,
    pub kinds: Vec<String>,
    pub seeds: Vec<u64>,
    pub fold_count: usize,
    pub records: Vec<BlockRecord>,
}

impl RunManifest {
    pub fn skipped(&self) -> usize {
        self.records.iter().filter(|r| r.status == BlockStatus::Skipped).count()
    }

    pub fn record(&self, kind: ModelKind, seed: u64, fold: usize) -> Option<&BlockRecord> {
        self.records
            .iter()
            .find(|r| r.kind == kind.name() && r.seed == seed && r.fold == fold)
    }

    /// Mean test gate activation over the trained blocks of `kind`.
    pub fn mean_gate(&self, kind: ModelKind) -> Option<f64> {
        let g: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.kind == kind.name())
            .filter_map(|r| r.gate_mean)
            .collect();
        crate::metrics::mean(&g)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    /// Sorted by model, seed, fold, sample id.
    pub predictions: Vec<PredictionRow>,
}

/// Header fields that must agree for a resumed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunHeader {
    protocol: ProtocolConfig,
    model: ModelConfig,
    train: TrainConfig,
    samples: usize,
}

/// Stable per-block seed: the same (base seed, kind, fold, purpose) always
/// maps to the same value regardless of scheduling.
pub(crate) fn derive_seed(base: u64, kind: ModelKind, fold: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(format!("{base}/{}/{fold}/{purpose}", kind.name()));
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn block_stem(kind: ModelKind, seed: u64, fold: usize) -> String {
    format!("{}_s{seed}_f{fold}", kind.name())
}

fn model_config_for(ds: &Dataset, template: &ModelConfig, kind: ModelKind, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        seed,
        lookback: ds.params.lookback,
        price_features: PRICE_FEATURES,
        embed_dim: ds.assets.iter().flat_map(|a| a.snapshots.first()).map(|s| s.embedding.len()).next().unwrap_or(template.embed_dim),
        web_dim: ds.schema.scalars.len(),
        ..template.clone()
    }
}

struct Block {
    kind: ModelKind,
    seed: u64,
    fold: FoldSpec,
}

fn run_block(ds: &Dataset, spec: &ExperimentSpec, b: &Block) -> Result<(BlockRecord, Vec<PredictionRow>, Option<crate::models::Checkpoint>)> {
    let mcfg = model_config_for(ds, &spec.model, b.kind, derive_seed(b.seed, b.kind, b.fold.index, "init"));
    let tcfg = TrainConfig {
        seed: derive_seed(b.seed, b.kind, b.fold.index, "train"),
        ..spec.train.clone()
    };
    let norm = WebNorm::fit_range(ds, b.fold.train.clone())?;
    let train = FoldData::build(ds, b.fold.train.clone(), &norm);
    let val = FoldData::build(ds, b.fold.val.clone(), &norm);
    let mut rec = BlockRecord {
        kind: b.kind.name().to_string(),
        seed: b.seed,
        fold: b.fold.index,
        status: BlockStatus::Skipped,
        reason: None,
        best_epoch: 0,
        best_val_auc: None,
        predictions: 0,
        gate_mean: None,
        curve: Vec::new(),
        prediction_file: None,
        checkpoint: None,
    };
    match train_on(&mcfg, &tcfg, &train, &val)? {
        FoldOutcome::Skipped { reason } => {
            rec.reason = Some(reason);
            Ok((rec, Vec::new(), None))
        }
        FoldOutcome::Trained(t) => {
            let test = FoldData::build(ds, b.fold.test.clone(), &norm);
            let (rows, gate) = predict_fold(&t.model, &test, b.fold.index, b.seed)?;
            rec.status = BlockStatus::Trained;
            rec.best_epoch = t.best_epoch;
            rec.best_val_auc = Some(t.best_val_auc);
            rec.predictions = rows.len();
            rec.gate_mean = gate;
            rec.curve = t.curve;
            let ck = spec.save_checkpoints.then(|| t.model.checkpoint());
            Ok((rec, rows, ck))
        }
    }
}

fn read_log(path: &Path) -> Result<Vec<BlockRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BlockRecord>(line) {
            Ok(r) => out.push(r),
            // A torn final line from an interrupted write is ignored.
            Err(_) if n + 1 == lines.len() => {}
            Err(e) => return Err(WalkError::Manifest(format!("{}:{}: {e}", path.display(), n + 1))),
        }
    }
    Ok(out)
}

fn check_header(dir: &Path, header: &RunHeader) -> Result<()> {
    let path = dir.join(HEADER);
    if path.exists() {
        let s = fs::read_to_string(&path).map_err(io_err(&path))?;
        let old: RunHeader = serde_json::from_str(&s).map_err(|e| WalkError::Manifest(e.to_string()))?;
        if &old != header {
            return Err(WalkError::Manifest(format!(
                "{} was produced with a different protocol, model or training config",
                dir.display()
            )));
        }
        return Ok(());
    }
    let s = serde_json::to_string_pretty(header).map_err(|e| WalkError::Manifest(e.to_string()))?;
    fs::write(&path, s).map_err(io_err(&path))
}

fn sort_rows(rows: &mut [PredictionRow]) {
    rows.sort_by(|a, b| {
        (a.model.as_str(), a.seed, a.fold, a.sample_id).cmp(&(b.model.as_str(), b.seed, b.fold, b.sample_id))
    });
}

/// Train and evaluate every (kind, seed, fold) block. With an output
/// directory, blocks already recorded in its manifest are not rerun.
pub fn run_experiment(
    ds: &Dataset,
    spec: &ExperimentSpec,
    on_block: &(dyn Fn(&BlockRecord) + Sync),
) -> Result<RunOutput> {
    spec.train.validate()?;
    if spec.kinds.is_empty() || spec.seeds.is_empty() {
        return Err(WalkError::Train("at least one kind and one seed are required".into()));
    }
    let mut folds = make_folds(ds.len(), &spec.protocol)?;
    if let Some(k) = spec.max_folds {
        folds.truncate(k);
    }

    let mut done: BTreeMap<(String, u64, usize), (BlockRecord, Vec<PredictionRow>)> = BTreeMap::new();
    let log = match &spec.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("predictions")).map_err(io_err(dir))?;
            if spec.save_checkpoints {
                fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
            }
            check_header(
                dir,
                &RunHeader {
                    protocol: spec.protocol.clone(),
                    model: spec.model.clone(),
                    train: spec.train.clone(),
                    samples: ds.len(),
                },
            )?;
            let log_path = dir.join(LOG);
            for r in read_log(&log_path)? {
                let rows = match &r.prediction_file {
                    Some(f) => match read_predictions(&dir.join(f)) {
                        Ok(rows) if rows.len() == r.predictions => rows,
                        _ => continue,
                    },
                    None => Vec::new(),
                };
                done.insert(r.key(), (r, rows));
            }
            let f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
            Some(Mutex::new(f))
        }
        None => None,
    };

    let mut todo = Vec::new();
    for &kind in &spec.kinds {
        for &seed in &spec.seeds {
            for fold in &folds {
                if !done.contains_key(&(kind.name().to_string(), seed, fold.index)) {
                    todo.push(Block {
                        kind,
                        seed,
                        fold: fold.clone(),
                    });
                }
            }
        }
    }

    let exec = |b: &Block| -> Result<(BlockRecord, Vec<PredictionRow>)> {
        let (mut rec, rows, ck) = run_block(ds, spec, b)?;
        if let (Some(dir), Some(log)) = (&spec.out_dir, &log) {
            let stem = block_stem(b.kind, b.seed, b.fold.index);
            if rec.status == BlockStatus::Trained {
                let rel = format!("predictions/{stem}.csv");
                write_predictions(&rows, &dir.join(&rel)).map_err(|e| WalkError::Manifest(e.to_string()))?;
                rec.prediction_file = Some(rel);
            }
            if let Some(ck) = ck {
                let rel = format!("checkpoints/{stem}.json");
                ck.save(&dir.join(&rel))?;
                rec.checkpoint = Some(rel);
            }
            let mut line = serde_json::to_string(&rec).map_err(|e| WalkError::Manifest(e.to_string()))?;
            line.push('\n');
            let mut f = log.lock().expect("manifest lock");
            f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(io_err(&dir.join(LOG)))?;
        }
        on_block(&rec);
        Ok((rec, rows))
    };

    let results: Vec<Result<(BlockRecord, Vec<PredictionRow>)>> = if spec.jobs > 1 && todo.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| WalkError::Train(e.to_string()))?;
        pool.install(|| todo.par_iter().map(exec).collect())
    } else {
        todo.iter().map(exec).collect()
    };
    for r in results {
        let (rec, rows) = r?;
        done.insert(rec.key(), (rec, rows));
    }

    // Only blocks belonging to this spec are reported.
    let wanted = |k: &(String, u64, usize)| {
        spec.kinds.iter().any(|x| x.name() == k.0) && spec.seeds.contains(&k.1) && folds.iter().any(|f| f.index == k.2)
    };
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for (k, (rec, rows)) in done {
        if wanted(&k) {
            records.push(rec);
            predictions.extend(rows);
        }
    }
    sort_rows(&mut predictions);
    let manifest = RunManifest {
        protocol: spec.protocol.clone(),
        kinds: spec.kinds.iter().map(|k| k.name().to_string()).collect(),
        seeds: spec.seeds.clone(),
        fold_count: folds.len(),
        records,
    };
    if let Some(dir) = &spec.out_dir {
        let p = dir.join(COMBINED);
        write_predictions(&predictions, &p).map_err(|e| WalkError::Manifest(e.to_string()))?;
        let p = dir.join(SUMMARY);
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| WalkError::Manifest(e.to_string()))?;
        fs::write(&p, s).map_err(io_err(&p))?;
    }
    Ok(RunOutput { manifest, predictions })
}
