//! `cgcma` command-line front end.
//!
//! Exit codes: 0 on success, 1 when inputs or configuration fail
//! validation, 2 on runtime failures (I/O, numerical aborts).

mod config;

use cgcma::data::{
    align_bars, load_ohlcv, load_web, AlignParams, BarAligned, DataError, Dataset, WebSchema,
};
use cgcma::metrics::{
    build_report, lag_signal_sharpe, prediction_lag_bins, read_predictions, uniform_edges, LagBinReport,
    MetricsError, PredictionRow, ReportOptions,
};
use cgcma::models::{ModelError, ModelKind};
use cgcma::synth::{generate, SynthConfig};
use cgcma::walkforward::{run_experiment, BlockRecord, BlockStatus, ExperimentSpec, ProtocolConfig, WalkError};
use clap::{Args, Parser, Subcommand};
use config::FileConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            DataError::Rows(rows) => {
                let mut s = format!("{} invalid rows:", rows.len());
                for r in rows {
                    s.push_str(&format!("\n  line {}: {}", r.line, r.reason));
                }
                CliError::Invalid(s)
            }
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) | ModelError::Checkpoint(_) => CliError::Runtime(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<WalkError> for CliError {
    fn from(e: WalkError) -> Self {
        match e {
            WalkError::Data(d) => d.into(),
            WalkError::Model(m) => m.into(),
            WalkError::Tensor(_) | WalkError::Io { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) => CliError::Runtime(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io(path))
}

#[derive(Parser)]
#[command(name = "cgcma", version, about = "Lag-aware multimodal fusion: synthesis, alignment, walk-forward training and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic price/news corpus.
    Synth(SynthArgs),
    /// Align prices with web snapshots into a dataset file.
    Build(BuildArgs),
    /// Walk-forward training over kinds, seeds and folds.
    Train(TrainArgs),
    /// Tables and figure data from prediction files.
    Report(ReportArgs),
    /// Directional signal Sharpe stratified by lag.
    LagAnalysis(LagArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_bars: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Permute snapshot contents across events with this seed.
    #[arg(long)]
    shuffle_text: Option<u64>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    /// Price CSV; repeat for several assets.
    #[arg(long)]
    prices: Vec<PathBuf>,
    /// Web JSONL, one per price file.
    #[arg(long)]
    web: Vec<PathBuf>,
    /// Asset names, one per price file.
    #[arg(long)]
    asset: Vec<String>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    tau_max: Option<i64>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Keep samples with |scalar| ≥ threshold, as `name:threshold`.
    #[arg(long)]
    min_strength: Option<String>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated model kinds.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Price encoder depth.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Prediction CSVs or run directories holding `predictions.csv`.
    #[arg(long, required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    #[arg(long)]
    theta_long: Option<f64>,
    #[arg(long)]
    theta_short: Option<f64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    edges: Vec<i64>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct LagArgs {
    #[command(flatten)]
    common: Common,
    /// A built dataset; alternatively give --prices/--web.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    prices: Vec<PathBuf>,
    #[arg(long)]
    web: Vec<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    tau_max: Option<i64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    edges: Vec<i64>,
    #[arg(long)]
    bin_width: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Build(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Report(a) => cmd_report(a),
        Command::LagAnalysis(a) => cmd_lag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Provenance {
    seed: u64,
    config_hash: String,
    shuffle_text: Option<u64>,
    config: SynthConfig,
    files: Vec<(String, String)>,
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let file = config::load(a.common.config.as_deref())?;
    let mut cfg = file.synth;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_bars {
        cfg.n_bars = n;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    cfg.validate()?;
    let mut corpus = generate(&cfg)?;
    if let Some(s) = a.shuffle_text {
        corpus = corpus.with_shuffled_text(s);
    }
    corpus.write(&a.out)?;

    let cfg_json = serde_json::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut files = Vec::new();
    for name in ["prices.csv", "web.jsonl", "schema.json"] {
        let p = a.out.join(name);
        files.push((name.to_string(), sha256_hex(&std::fs::read(&p).map_err(io(&p))?)));
    }
    let prov = Provenance {
        seed: cfg.seed,
        config_hash: sha256_hex(cfg_json.as_bytes()),
        shuffle_text: a.shuffle_text,
        config: cfg.clone(),
        files,
    };
    let p = a.out.join("provenance.json");
    write(&p, serde_json::to_string_pretty(&prov).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    println!(
        "wrote {} bars, {} snapshots to {} (seed {}, config {})",
        corpus.bars.len(),
        corpus.snapshots.len(),
        a.out.display(),
        cfg.seed,
        &prov.config_hash[..12]
    );
    Ok(())
}

fn load_schema(path: Option<&Path>) -> Result<WebSchema, CliError> {
    Ok(match path {
        Some(p) => WebSchema::load(p)?,
        None => WebSchema::default(),
    })
}

/// File stem, or the parent directory when the stem is the generic `prices`.
fn default_asset_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    match stem.as_deref() {
        Some("prices") | None => path
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| "asset".to_string(), |d| d.to_string_lossy().into_owned()),
        Some(s) => s.to_string(),
    }
}

fn parse_min_strength(s: &str) -> Result<(String, f64), CliError> {
    let (name, thr) = s
        .rsplit_once(':')
        .ok_or_else(|| CliError::Invalid(format!("min_strength `{s}` must look like name:threshold")))?;
    let thr: f64 = thr
        .parse()
        .map_err(|_| CliError::Invalid(format!("min_strength threshold `{thr}` is not a number")))?;
    Ok((name.to_string(), thr))
}

/// Load one asset's inputs, reporting every rejected web line.
fn load_asset(prices: &Path, web: &Path, schema: &WebSchema) -> Result<(Vec<cgcma::data::Bar>, Vec<cgcma::data::Snapshot>), CliError> {
    let series = load_ohlcv(prices)?;
    for g in &series.gaps {
        eprintln!("warning: {}: {} missing bar(s) after minute {}", prices.display(), g.missing, g.after);
    }
    let web_load = load_web(web, schema)?;
    if !web_load.rejections.is_empty() {
        let mut s = format!("{}: {} invalid lines:", web.display(), web_load.rejections.len());
        for r in &web_load.rejections {
            s.push_str(&format!("\n  line {}: {}", r.line, r.reason));
        }
        return Err(CliError::Invalid(s));
    }
    Ok((series.bars, web_load.snapshots))
}

fn cmd_build(a: BuildArgs) -> Result<(), CliError> {
    let file = config::load(a.common.config.as_deref())?;
    let d = file.data;
    let prices = if a.prices.is_empty() { d.prices } else { a.prices };
    let web = if a.web.is_empty() { d.web } else { a.web };
    if prices.is_empty() || prices.len() != web.len() {
        return Err(CliError::Invalid(format!(
            "need one web file per price file (got {} prices, {} web)",
            prices.len(),
            web.len()
        )));
    }
    let names = if a.asset.is_empty() { d.assets } else { a.asset };
    let names: Vec<String> = if names.is_empty() {
        prices
            .iter()
            .map(|p| default_asset_name(p))
            .collect()
    } else if names.len() == prices.len() {
        names
    } else {
        return Err(CliError::Invalid("need one asset name per price file".into()));
    };
    let schema = load_schema(a.schema.as_deref().or(d.schema.as_deref()))?;
    let params = AlignParams {
        tau_max: a.tau_max.unwrap_or(d.tau_max),
        lookback: a.lookback.unwrap_or(d.lookback),
        horizon: a.horizon.unwrap_or(d.horizon),
    };
    params.validate()?;
    let strength = a.min_strength.or(d.min_strength).map(|s| parse_min_strength(&s)).transpose()?;

    let mut parts = Vec::new();
    for ((p, w), name) in prices.iter().zip(&web).zip(&names) {
        let (bars, snaps) = load_asset(p, w, &schema)?;
        let ms = strength.as_ref().map(|(n, t)| (n.as_str(), *t));
        parts.push(Dataset::build(name, bars, snaps, schema.clone(), params, ms)?);
    }
    let ds = if parts.len() == 1 { parts.pop().expect("one part") } else { Dataset::pool(parts)? };
    ds.check_causality()?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let hash = ds.save(&a.out)?;
    print!("{}", ds.stats().render());
    println!("dataset: {} ({} samples, sha256 {hash})", a.out.display(), ds.len());
    Ok(())
}

fn parse_kinds(names: &[String]) -> Result<Vec<ModelKind>, CliError> {
    let mut kinds = Vec::new();
    for n in names {
        let k: ModelKind = n.parse()?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(CliError::Invalid("no model kinds given".into()));
    }
    Ok(kinds)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file: FileConfig = config::load(a.common.config.as_deref())?;
    let e = file.experiment;
    let dataset = a
        .dataset
        .or(file.data.dataset)
        .ok_or_else(|| CliError::Invalid("no dataset given (--dataset or [data].dataset)".into()))?;
    if !dataset.exists() {
        return Err(CliError::Invalid(format!("dataset {} does not exist", dataset.display())));
    }
    let protocol = ProtocolConfig::by_name(a.protocol.as_deref().unwrap_or(&e.protocol))?;
    let kinds = parse_kinds(if a.kinds.is_empty() { &e.kinds } else { &a.kinds })?;
    let seeds = if a.seeds.is_empty() { e.seeds } else { a.seeds };
    if seeds.is_empty() {
        return Err(CliError::Invalid("no seeds given".into()));
    }
    let mut model = file.model;
    if let Some(l) = a.layers {
        model.layers = l;
    }
    let mut train = file.train;
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.patience {
        train.patience = v;
    }
    if let Some(v) = a.batch {
        train.batch = v;
    }
    if let Some(v) = a.lr {
        train.lr = v;
    }
    train.validate()?;
    model.validate()?;

    let ds = Dataset::load(&dataset)?;
    let spec = ExperimentSpec {
        protocol,
        kinds,
        seeds,
        model,
        train,
        jobs: a.jobs.unwrap_or(e.jobs).max(1),
        max_folds: a.max_folds.or(e.max_folds),
        out_dir: Some(a.out.clone()),
        save_checkpoints: e.checkpoints && !a.no_checkpoints,
    };
    let progress = |r: &BlockRecord| match r.status {
        BlockStatus::Trained => println!(
            "[{} seed {} fold {}] best epoch {}/{} val AUC {:.4}, {} test predictions",
            r.kind,
            r.seed,
            r.fold,
            r.best_epoch,
            r.curve.len(),
            r.best_val_auc.unwrap_or(f64::NAN),
            r.predictions
        ),
        BlockStatus::Skipped => println!(
            "[{} seed {} fold {}] skipped: {}",
            r.kind,
            r.seed,
            r.fold,
            r.reason.as_deref().unwrap_or("")
        ),
    };
    let out = run_experiment(&ds, &spec, &progress)?;
    println!(
        "{} blocks over {} folds ({} skipped); predictions in {}",
        out.manifest.records.len(),
        out.manifest.fold_count,
        out.manifest.skipped(),
        a.out.join("predictions.csv").display()
    );
    Ok(())
}

fn collect_predictions(paths: &[PathBuf]) -> Result<Vec<PredictionRow>, CliError> {
    let mut rows = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("predictions.csv") } else { p.clone() };
        if !file.exists() {
            return Err(CliError::Invalid(format!("prediction file {} does not exist", file.display())));
        }
        rows.extend(read_predictions(&file)?);
    }
    if rows.is_empty() {
        return Err(CliError::Invalid("no predictions found".into()));
    }
    Ok(rows)
}

fn check_edges(edges: &[i64]) -> Result<(), CliError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Invalid(format!("lag edges {edges:?} must be increasing with at least two values")));
    }
    Ok(())
}

fn model_lag_csv(reports: &std::collections::BTreeMap<String, LagBinReport>) -> String {
    let mut s = String::from("model,lag_lo,lag_hi,count,trades,mean_return,sharpe,low_count\n");
    for (m, rep) in reports {
        for line in rep.to_csv().lines().skip(1) {
            s.push_str(&format!("{m},{line}\n"));
        }
    }
    s
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let file = config::load(a.common.config.as_deref())?;
    let r = file.report;
    let opts = ReportOptions {
        theta_long: a.theta_long.unwrap_or(r.theta_long),
        theta_short: a.theta_short.unwrap_or(r.theta_short),
        baselines: if a.baselines.is_empty() { r.baselines } else { a.baselines },
        bootstrap_resamples: a.resamples.unwrap_or(r.bootstrap_resamples),
        bootstrap_seed: r.bootstrap_seed,
    };
    let edges = if a.edges.is_empty() { r.edges } else { a.edges };
    check_edges(&edges)?;
    let horizon = a.horizon.unwrap_or(r.horizon);
    let rows = collect_predictions(&a.predictions)?;
    let report = build_report(&rows, &opts)?;
    let lag = prediction_lag_bins(&rows, &edges, horizon, opts.theta_long, opts.theta_short);

    std::fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write(&a.out.join("main.csv"), report.main_csv())?;
    write(&a.out.join("aux.csv"), report.aux_csv())?;
    write(&a.out.join("folds.csv"), report.folds_csv())?;
    write(&a.out.join("bootstrap.csv"), report.bootstrap_csv())?;
    write(&a.out.join("lag_bins.csv"), model_lag_csv(&lag))?;
    write(&a.out.join("report.json"), report.to_json())?;
    let text = report.render_text();
    write(&a.out.join("report.txt"), &text)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{text}");
    Ok(())
}

fn cmd_lag(a: LagArgs) -> Result<(), CliError> {
    let file = config::load(a.common.config.as_deref())?;
    let d = file.data;
    let tau_max = a.tau_max.unwrap_or(d.tau_max);
    let horizon = a.horizon.unwrap_or(d.horizon);
    let edges = if !a.edges.is_empty() {
        a.edges
    } else if !file.lag.edges.is_empty() {
        file.lag.edges
    } else {
        let w = a.bin_width.unwrap_or(file.lag.bin_width);
        if w <= 0 {
            return Err(CliError::Invalid("bin width must be positive".into()));
        }
        uniform_edges(w, tau_max)
    };
    check_edges(&edges)?;

    let mut records: Vec<BarAligned> = Vec::new();
    if let Some(path) = a.dataset.or(d.dataset) {
        let ds = Dataset::load(&path)?;
        let k = ds.schema.direction_index();
        for asset in &ds.assets {
            records.extend(align_bars(&asset.bars, &asset.snapshots, tau_max, horizon, k)?);
        }
    } else {
        let prices = if a.prices.is_empty() { d.prices } else { a.prices };
        let web = if a.web.is_empty() { d.web } else { a.web };
        if prices.is_empty() || prices.len() != web.len() {
            return Err(CliError::Invalid("give --dataset or matching --prices/--web files".into()));
        }
        let schema = load_schema(a.schema.as_deref().or(d.schema.as_deref()))?;
        for (p, w) in prices.iter().zip(&web) {
            let (bars, snaps) = load_asset(p, w, &schema)?;
            records.extend(align_bars(&bars, &snaps, tau_max, horizon, schema.direction_index())?);
        }
    }
    let report = lag_signal_sharpe(&records, &edges, horizon);
    std::fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write(&a.out.join("lag_bins.csv"), report.to_csv())?;
    println!("{:>9} {:>9} {:>8} {:>8} {:>10}", "lag_lo", "lag_hi", "count", "trades", "sharpe");
    for b in &report.bins {
        println!(
            "{:>9} {:>9} {:>8} {:>8} {:>10}{}",
            b.lo,
            b.hi,
            b.count,
            b.trades,
            b.sharpe.map_or("n/a".into(), |s| format!("{s:.3}")),
            if b.low_count { "  (few samples)" } else { "" }
        );
    }
    if let Some(k) = report.argmax() {
        println!("strongest bin: [{}, {}]", report.bins[k].lo, report.bins[k].hi);
    }
    Ok(())
}
