//! The `relvar` command line.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and data errors, 3
//! when a search finishes with more than half of its jobs failed. Every
//! subcommand prints human-readable output followed by one line starting
//! with `RESULT` for scripts.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::data::{
    bias_histogram, clean, load_csv, synth_generate, CleanReport, DataError, Dataset, Generator, SynthSpec,
    DEFAULT_FILL_VALUES, MAPSS_REGRESSORS, MAPSS_TARGET,
};
use crate::mi::{mutual_information, MiConfig, MiError, ScalarSeries};
use crate::regressor::{predict_rows, rms_error, split_indices, train_lm, RegressorError, TrainConfig};
use crate::search::{
    report_table, run_search, EvalScope, FeatureSubset, Progress, RankingTable, RunOptions, SearchError, SearchSpec,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DEGRADED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: DataError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{failed} of {total} jobs failed")]
    Degraded { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Degraded { .. } => EXIT_DEGRADED,
            _ => EXIT_USAGE,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "relvar", version, about = "Exhaustive relevant-variable search scored by mutual information")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mutual information, Pearson correlation and normalized dependence of two columns.
    Mi(MiArgs),
    /// Train one network on a feature subset.
    Train(TrainArgs),
    /// Train and score every feature subset.
    Search(SearchArgs),
    /// Print the top rows of a ranking or checkpoint file.
    Report(ReportArgs),
    /// Write a synthetic dataset with known relevant features.
    Synth(SynthArgs),
    /// Histogram of the difference between two columns.
    BiasHist(BiasHistArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Sentinel values marking missing data; rows holding one are dropped.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub fill_values: Option<Vec<f64>>,
    /// TOML file with `[train]` and `[mi]` tables and `fill_values`; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MiFlags {
    #[arg(long)]
    pub chi2_threshold: Option<f64>,
    #[arg(long)]
    pub min_cell_count: Option<usize>,
    /// Report negative raw estimates as they are instead of clamping to zero.
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    #[command(flatten)]
    pub input: InputArgs,
    pub col_x: String,
    pub col_y: String,
    #[command(flatten)]
    pub mi: MiFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = MAPSS_TARGET)]
    pub target: String,
    /// Comma-separated column names, `all` or `mapss`.
    #[arg(long, default_value = "all")]
    pub features: String,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Directory receiving model.bin and trace.csv.
    #[arg(long, short, env = "RELVAR_OUTPUT_DIR", default_value = "relvar-out")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = MAPSS_TARGET)]
    pub target: String,
    /// Comma-separated column names, `all` (every numeric non-target column) or `mapss`.
    #[arg(long, default_value = "all")]
    pub features: String,
    #[arg(long, default_value_t = 1)]
    pub min_size: usize,
    /// Defaults to the universe size.
    #[arg(long)]
    pub max_size: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub mi: MiFlags,
    /// Defaults to the number of available cores.
    #[arg(long, env = "RELVAR_WORKERS")]
    pub workers: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long, conflicts_with = "restart")]
    pub resume: bool,
    /// Discard an existing checkpoint and start over.
    #[arg(long)]
    pub restart: bool,
    /// Rows on which predictions are scored: `all` or `test`.
    #[arg(long, default_value = "all")]
    pub eval_scope: EvalScope,
    /// Directory receiving checkpoint.jsonl and ranking.jsonl.
    #[arg(long, short, env = "RELVAR_OUTPUT_DIR", default_value = "relvar-out")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub top: usize,
    /// Print the number of jobs and exit without training.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub file: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of feature columns.
    #[arg(long, default_value_t = 6)]
    pub features: usize,
    /// e.g. `sin-mix:1,3,5`, `sin-product:1,2`, `identity:1`, `affine:1,1=2`.
    #[arg(long, default_value = "sin-mix:1,3,5")]
    pub generator: Generator,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasHistArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "AOD0550")]
    pub col_a: String,
    #[arg(long, default_value = MAPSS_TARGET)]
    pub col_b: String,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    mi: MiConfig,
    fill_values: Option<Vec<f64>>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn mi_config(base: MiConfig, flags: &MiFlags) -> Result<MiConfig> {
    let mut cfg = base;
    if let Some(t) = flags.chi2_threshold {
        cfg.chi2_threshold = t;
    }
    if let Some(m) = flags.min_cell_count {
        cfg.min_cell_count = m;
    }
    if flags.no_clamp {
        cfg.clamp_negative = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(base: TrainConfig, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(h) = flags.hidden {
        cfg.hidden_dim = h;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(m) = flags.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(p) = flags.patience {
        cfg.patience = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fill_values(args: &InputArgs, file: &FileConfig) -> Vec<f64> {
    args.fill_values
        .clone()
        .or_else(|| file.fill_values.clone())
        .unwrap_or_else(|| DEFAULT_FILL_VALUES.to_vec())
}

/// Loads `schema` (plus any other numeric columns) and drops rows with
/// missing values in the schema columns.
fn load_clean(path: &Path, schema: &[&str], fill: &[f64]) -> Result<(Dataset, CleanReport)> {
    let raw = load_csv(path, schema).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let columns = if schema.is_empty() { None } else { Some(schema) };
    Ok(clean(&raw, fill, columns)?)
}

fn print_clean_report(report: &CleanReport) {
    println!(
        "rows: {} read, {} kept, {} dropped",
        report.rows_in,
        report.rows_out,
        report.dropped()
    );
}

/// Resolves `--features` against the columns of `data`.
fn resolve_features(spec: &str, data: &Dataset, target: &str) -> Result<Vec<String>> {
    let names: Vec<String> = match spec.trim() {
        "all" => data.names().filter(|n| *n != target).map(String::from).collect(),
        "mapss" => MAPSS_REGRESSORS.iter().map(|s| s.to_string()).collect(),
        list => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Usage("no feature columns selected".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(CliError::Usage(format!("empty feature name in {spec:?}")));
        }
        if n == target {
            return Err(CliError::Usage(format!("target column \"{target}\" cannot also be a feature")));
        }
        if names[..i].contains(n) {
            return Err(CliError::Usage(format!("feature \"{n}\" listed twice")));
        }
        data.column(n)?;
    }
    Ok(names)
}

/// Columns that must be present before `--features` can be resolved.
fn required_columns<'a>(target: &'a str, features: &'a str) -> Vec<&'a str> {
    let mut cols = vec![target];
    match features.trim() {
        "all" => {}
        "mapss" => cols.extend(MAPSS_REGRESSORS),
        list => cols.extend(list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != target)),
    }
    cols
}

fn cmd_mi(args: &MiArgs) -> Result<()> {
    let file = read_config(args.input.config.as_deref())?;
    let cfg = mi_config(file.mi, &args.mi)?;
    let fill = fill_values(&args.input, &file);
    let mut schema = vec![args.col_x.as_str()];
    if args.col_y != args.col_x {
        schema.push(args.col_y.as_str());
    }
    let (data, report) = load_clean(&args.input.input, &schema, &fill)?;
    let x = ScalarSeries::new(data.column(&args.col_x)?.to_vec())?;
    let y = ScalarSeries::new(data.column(&args.col_y)?.to_vec())?;
    let s = mutual_information(&x, &y, &cfg)?;
    print_clean_report(&report);
    println!("mi_nats: {:.6}", s.mi_nats);
    println!("raw_mi:  {:.6}", s.raw_mi);
    println!("pearson: {:.6}", s.pearson);
    println!("delta:   {:.6}", s.delta);
    println!(
        "RESULT mi mi_nats={} raw_mi={} pearson={} delta={} rows={}",
        s.mi_nats,
        s.raw_mi,
        s.pearson,
        s.delta,
        data.row_count()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = read_config(args.input.config.as_deref())?;
    let cfg = train_config(file.train.clone(), &args.train)?;
    let fill = fill_values(&args.input, &file);
    let required = required_columns(&args.target, &args.features);
    let (data, report) = load_clean(&args.input.input, &required, &fill)?;
    let universe = resolve_features(&args.features, &data, &args.target)?;
    let all: Vec<usize> = (1..=universe.len()).collect();
    let features = FeatureSubset::from_indices(universe.into(), &all)?;

    let (model, trace) = train_lm(&data, &args.target, &features, &cfg)?;
    let split = split_indices(data.row_count(), &cfg)?;
    let pred = predict_rows(&model, &data, &features, Some(&split.test))?;
    let target = data.column(&args.target)?;
    let obs = ScalarSeries::new(split.test.iter().map(|&r| target[r]).collect())?;
    let test_rms = rms_error(&pred, &obs)?;

    create_dir(&args.output)?;
    let model_path = args.output.join("model.bin");
    let trace_path = args.output.join("trace.csv");
    model.save(&model_path)?;
    let mut w = BufWriter::new(File::create(&trace_path).map_err(io_err(&trace_path))?);
    trace
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(io_err(&trace_path))?;

    print_clean_report(&report);
    println!("features: {}", features.columns().join(","));
    println!(
        "epochs: {} (best {}, stopped: {})",
        trace.epochs.len(),
        trace.best_epoch,
        trace.stop_reason
    );
    println!("val rms:  {:.6}", trace.best_val_rms());
    println!("test rms: {:.6}", test_rms);
    println!("model: {}", model_path.display());
    println!("trace: {}", trace_path.display());
    println!(
        "RESULT train test_rms={} val_rms={} epochs={} best_epoch={} stop_reason={}",
        test_rms,
        trace.best_val_rms(),
        trace.epochs.len(),
        trace.best_epoch,
        trace.stop_reason
    );
    Ok(())
}

fn fmt_duration(d: Duration) -> String {
    let s = d.as_secs();
    format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
}

struct ProgressLine {
    tty: bool,
    last: Option<Instant>,
}

impl ProgressLine {
    fn show(&mut self, p: &Progress) {
        let done = p.done == p.total;
        let interval = if self.tty { Duration::from_millis(200) } else { Duration::from_secs(10) };
        if !done && self.last.is_some_and(|t| t.elapsed() < interval) {
            return;
        }
        self.last = Some(Instant::now());
        let eta = p.eta().map_or_else(|| "--".to_string(), fmt_duration);
        let line = format!("progress {}/{} elapsed {} eta {}", p.done, p.total, fmt_duration(p.elapsed), eta);
        let mut err = io::stderr().lock();
        let _ = if self.tty {
            write!(err, "\r{line}{}", if done { "\n" } else { "" })
        } else {
            writeln!(err, "{line}")
        };
    }
}

fn cmd_search(args: &SearchArgs) -> Result<()> {
    let file = read_config(args.input.config.as_deref())?;
    let train = train_config(file.train.clone(), &args.train)?;
    let mi = mi_config(file.mi, &args.mi)?;
    let fill = fill_values(&args.input, &file);
    let workers = match args.workers {
        Some(0) => return Err(CliError::Usage("--workers must be >= 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };

    let required = required_columns(&args.target, &args.features);
    let (data, report) = load_clean(&args.input.input, &required, &fill)?;
    let universe = resolve_features(&args.features, &data, &args.target)?;
    let mut spec = SearchSpec::new(args.target.clone(), universe, train);
    spec.min_size = args.min_size;
    spec.max_size = args.max_size.unwrap_or(spec.universe.len());
    spec.eval_scope = args.eval_scope;
    spec.mi = mi;
    let total = spec.jobs()?.len();

    print_clean_report(&report);
    println!("universe: {}", spec.universe.join(","));
    if args.dry_run {
        println!("jobs: {total}");
        println!("RESULT search jobs={total} dry_run=true");
        return Ok(());
    }

    create_dir(&args.output)?;
    let checkpoint = args.output.join("checkpoint.jsonl");
    let ranking = args.output.join("ranking.jsonl");
    if checkpoint.exists() && !args.resume && !args.restart {
        return Err(CliError::Usage(format!(
            "checkpoint {} already exists; pass --resume to continue it or --restart to discard it",
            checkpoint.display()
        )));
    }
    println!("jobs: {total} on {workers} workers");

    let mut line = ProgressLine {
        tty: io::stderr().is_terminal(),
        last: None,
    };
    let mut show = |p: &Progress| line.show(p);
    let table = run_search(
        &data,
        &spec,
        RunOptions {
            workers,
            checkpoint: Some(checkpoint.clone()),
            resume: args.resume,
            stop_after: args.stop_after,
            progress: Some(&mut show),
        },
    )?;
    table.save(&ranking).map_err(io_err(&ranking))?;

    print!("{}", report_table(&table, args.top));
    let failed = table.failed_count();
    println!("checkpoint: {}", checkpoint.display());
    println!("ranking: {}", ranking.display());
    let best = table.best().filter(|r| r.is_ok());
    println!(
        "RESULT search jobs={} failed={} best={} mi_nats={} pearson={}",
        table.results.len(),
        failed,
        best.map_or_else(|| "none".to_string(), |r| r.subset.canonical()),
        best.and_then(|r| r.score).map_or(f64::NAN, |s| s.mi_nats),
        best.and_then(|r| r.score).map_or(f64::NAN, |s| s.pearson),
    );
    if failed * 2 > table.results.len() {
        return Err(CliError::Degraded {
            failed,
            total: table.results.len(),
        });
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let table = RankingTable::load(&args.file)?;
    print!("{}", report_table(&table, args.top));
    println!(
        "RESULT report rows={} failed={}",
        table.results.len(),
        table.failed_count()
    );
    Ok(())
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    body(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_features: args.features,
        generator: args.generator.clone(),
        noise_sigma: args.noise,
        n_rows: args.rows,
        seed: args.seed,
    };
    let data = synth_generate(&spec)?;
    write_file(&args.output, |w| Ok(data.write_csv(w)?))?;
    println!("wrote {} rows x {} columns to {}", data.row_count(), data.columns().len(), args.output.display());
    println!("relevant features: {:?}", spec.relevant());
    println!("RESULT synth rows={} sha256={}", data.row_count(), data.content_hash());
    Ok(())
}

fn cmd_bias_hist(args: &BiasHistArgs) -> Result<()> {
    let file = read_config(args.input.config.as_deref())?;
    let fill = fill_values(&args.input, &file);
    let mut schema = vec![args.col_a.as_str()];
    if args.col_b != args.col_a {
        schema.push(args.col_b.as_str());
    }
    let (data, report) = load_clean(&args.input.input, &schema, &fill)?;
    let hist = bias_histogram(&data, &args.col_a, &args.col_b, args.bins)?;
    write_file(&args.output, |w| Ok(hist.write_csv(w)?))?;
    print_clean_report(&report);
    println!(
        "{} - {}: {} values in {} bins over [{}, {}]",
        args.col_a,
        args.col_b,
        hist.total(),
        hist.counts.len(),
        hist.bin_edges[0],
        hist.bin_edges[hist.counts.len()]
    );
    println!("RESULT bias-hist bins={} total={}", hist.counts.len(), hist.total());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mi(a) => cmd_mi(a),
        Command::Train(a) => cmd_train(a),
        Command::Search(a) => cmd_search(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
        Command::BiasHist(a) => cmd_bias_hist(a),
    }
}

fn report_error(e: &impl Display) {
    eprintln!("error: {e}");
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            e.exit_code()
        }
    }
}
