//! Exhaustive feature-subset search.
//!
//! Every subset of the candidate columns is one job: train a network on it,
//! predict the target, and score predicted against observed values. Jobs run
//! on a pool of worker threads; the coordinating thread is the only writer of
//! the checkpoint file, which holds one JSON line per finished job so that an
//! interrupted search can resume where it stopped.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize};
use std::sync::{atomic, mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::mi::{self, DependenceScore, MiConfig};
use crate::regressor::{self, RegressorError, StopReason, TrainConfig};

/// Largest universe a bitmask subset can address.
pub const MAX_UNIVERSE: usize = 63;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("feature universe is empty")]
    EmptyUniverse,
    #[error("feature universe has {0} columns; at most {MAX_UNIVERSE} are supported")]
    UniverseTooLarge(usize),
    #[error("invalid subset size bounds {min}..={max} for a universe of {n}")]
    InvalidSizeBounds { min: usize, max: usize, n: usize },
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("workers must be >= 1")]
    NoWorkers,
    #[error("checkpoint {path} is corrupt at line {line}: {reason}")]
    CheckpointCorrupt { path: PathBuf, line: usize, reason: String },
    #[error("checkpoint {path} belongs to a different search: {reason}")]
    CheckpointMismatch { path: PathBuf, reason: String },
    #[error("search interrupted after {completed} of {total} jobs")]
    Interrupted { completed: usize, total: usize },
    #[error("malformed ranking file at line {line}: {reason}")]
    MalformedRanking { line: usize, reason: String },
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A non-empty selection over an ordered universe of column names.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureSubset {
    universe: Arc<[String]>,
    mask: u64,
}

impl FeatureSubset {
    pub fn new(universe: Arc<[String]>, mask: u64) -> Result<Self, SearchError> {
        let n = universe.len();
        if n == 0 {
            return Err(SearchError::EmptyUniverse);
        }
        if n > MAX_UNIVERSE {
            return Err(SearchError::UniverseTooLarge(n));
        }
        if mask == 0 || mask >> n != 0 {
            return Err(SearchError::InvalidSubset(format!(
                "mask {mask:#x} is empty or outside a universe of {n}"
            )));
        }
        Ok(FeatureSubset { universe, mask })
    }

    /// From 1-based universe positions.
    pub fn from_indices(universe: Arc<[String]>, indices: &[usize]) -> Result<Self, SearchError> {
        let n = universe.len();
        let mut mask = 0u64;
        for &i in indices {
            if i == 0 || i > n.min(MAX_UNIVERSE) {
                return Err(SearchError::InvalidSubset(format!("index {i} outside 1..={n}")));
            }
            mask |= 1 << (i - 1);
        }
        Self::new(universe, mask)
    }

    pub fn from_names(universe: Arc<[String]>, names: &[&str]) -> Result<Self, SearchError> {
        let indices = names
            .iter()
            .map(|name| {
                universe
                    .iter()
                    .position(|u| u == name)
                    .map(|p| p + 1)
                    .ok_or_else(|| SearchError::InvalidSubset(format!("unknown column {name:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_indices(universe, &indices)
    }

    /// Parses the canonical comma-separated index form.
    pub fn parse(universe: Arc<[String]>, canonical: &str) -> Result<Self, SearchError> {
        let indices = canonical
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| SearchError::InvalidSubset(format!("bad subset string {canonical:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let subset = Self::from_indices(universe, &indices)?;
        if subset.canonical() != canonical {
            return Err(SearchError::InvalidSubset(format!("{canonical:?} is not in canonical form")));
        }
        Ok(subset)
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn universe(&self) -> &Arc<[String]> {
        &self.universe
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ascending 1-based universe positions.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.universe.len())
            .filter(|i| self.mask >> i & 1 == 1)
            .map(|i| i + 1)
            .collect()
    }

    pub fn columns(&self) -> Vec<&str> {
        self.indices().into_iter().map(|i| self.universe[i - 1].as_str()).collect()
    }

    /// e.g. `"2,3,4,5"`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, i) in self.indices().into_iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "{i}");
        }
        s
    }

    pub fn contains(&self, other: &FeatureSubset) -> bool {
        self.mask & other.mask == other.mask
    }

    pub fn is_disjoint(&self, other: &FeatureSubset) -> bool {
        self.mask & other.mask == 0
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Every subset with size in `min_size..=max_size`, in ascending mask order.
pub fn enumerate_subsets(
    universe: Arc<[String]>,
    min_size: usize,
    max_size: usize,
) -> Result<Vec<FeatureSubset>, SearchError> {
    let n = universe.len();
    if n == 0 {
        return Err(SearchError::EmptyUniverse);
    }
    if n > MAX_UNIVERSE {
        return Err(SearchError::UniverseTooLarge(n));
    }
    if min_size < 1 || min_size > max_size || max_size > n {
        return Err(SearchError::InvalidSizeBounds {
            min: min_size,
            max: max_size,
            n,
        });
    }
    let sizes = min_size as u32..=max_size as u32;
    Ok((1..=u64::MAX >> (64 - n))
        .filter(|m| sizes.contains(&m.count_ones()))
        .map(|mask| FeatureSubset {
            universe: universe.clone(),
            mask,
        })
        .collect())
}

/// Rows over which predicted and observed targets are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    #[default]
    AllRows,
    TestSplit,
}

impl FromStr for EvalScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" | "all_rows" => Ok(EvalScope::AllRows),
            "test" | "test_split" => Ok(EvalScope::TestSplit),
            _ => Err(format!("unknown eval scope {s:?} (expected all or test)")),
        }
    }
}

/// Everything a search depends on besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    pub target: String,
    pub universe: Vec<String>,
    pub min_size: usize,
    pub max_size: usize,
    pub eval_scope: EvalScope,
    pub train: TrainConfig,
    pub mi: MiConfig,
}

impl SearchSpec {
    pub fn new(target: impl Into<String>, universe: Vec<String>, train: TrainConfig) -> Self {
        let n = universe.len();
        SearchSpec {
            target: target.into(),
            universe,
            min_size: 1,
            max_size: n,
            eval_scope: EvalScope::AllRows,
            train,
            mi: MiConfig::default(),
        }
    }

    pub fn universe_arc(&self) -> Arc<[String]> {
        self.universe.clone().into()
    }

    pub fn jobs(&self) -> Result<Vec<FeatureSubset>, SearchError> {
        enumerate_subsets(self.universe_arc(), self.min_size, self.max_size)
    }

    pub fn manifest(&self, data: &Dataset) -> Manifest {
        Manifest {
            tool_version: TOOL_VERSION.to_string(),
            dataset_sha256: data.content_hash(),
            target: self.target.clone(),
            universe: self.universe.clone(),
            seed: self.train.seed,
            min_size: self.min_size,
            max_size: self.max_size,
            eval_scope: self.eval_scope,
            train: self.train.clone(),
            mi: self.mi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub subset: FeatureSubset,
    pub status: JobStatus,
    pub score: Option<DependenceScore>,
    /// RMS on the held-out test rows, in target units.
    pub test_rms: Option<f64>,
    pub epochs: usize,
    pub stop_reason: Option<StopReason>,
    /// Seconds.
    pub wall_time: f64,
}

impl SearchResult {
    pub fn is_ok(&self) -> bool {
        self.status == JobStatus::Ok
    }

    fn failed(subset: FeatureSubset, reason: String, wall_time: f64) -> Self {
        SearchResult {
            subset,
            status: JobStatus::Failed(reason),
            score: None,
            test_rms: None,
            epochs: 0,
            stop_reason: None,
            wall_time,
        }
    }
}

/// Ranking order: successful jobs by MI descending, then Pearson descending,
/// then canonical subset string ascending; failed jobs last by subset string.
pub fn compare_results(a: &SearchResult, b: &SearchResult) -> Ordering {
    match (&a.score, &b.score) {
        (Some(sa), Some(sb)) => mi::compare_scores(sa, sb),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.subset.canonical().cmp(&b.subset.canonical()))
}

/// Trains on one subset and scores predicted against observed target values.
/// Errors are folded into a failed result.
pub fn evaluate_subset(
    subset: &FeatureSubset,
    data: &Dataset,
    target_col: &str,
    train: &TrainConfig,
    mi_cfg: &MiConfig,
    scope: EvalScope,
) -> SearchResult {
    let start = Instant::now();
    match try_evaluate(subset, data, target_col, train, mi_cfg, scope) {
        Ok(mut r) => {
            r.wall_time = start.elapsed().as_secs_f64();
            r
        }
        Err(e) => SearchResult::failed(subset.clone(), e.to_string(), start.elapsed().as_secs_f64()),
    }
}

fn try_evaluate(
    subset: &FeatureSubset,
    data: &Dataset,
    target_col: &str,
    train: &TrainConfig,
    mi_cfg: &MiConfig,
    scope: EvalScope,
) -> Result<SearchResult, RegressorError> {
    let split = regressor::split_indices(data.row_count(), train)?;
    let (model, trace) = regressor::train_lm_on_split(data, target_col, subset, &split, train)?;
    let observed = data.column(target_col)?;

    let test_pred = regressor::predict_rows(&model, data, subset, Some(&split.test))?;
    let test_obs = mi::ScalarSeries::new(split.test.iter().map(|&r| observed[r]).collect())?;
    let test_rms = regressor::rms_error(&test_pred, &test_obs)?;

    let (pred, obs) = match scope {
        EvalScope::AllRows => (
            regressor::predict(&model, data, subset)?,
            mi::ScalarSeries::new(observed.to_vec())?,
        ),
        EvalScope::TestSplit => (test_pred, test_obs),
    };
    let score = mi::mutual_information(&pred, &obs, mi_cfg)?;
    Ok(SearchResult {
        subset: subset.clone(),
        status: JobStatus::Ok,
        score: Some(score),
        test_rms: Some(test_rms),
        epochs: trace.epochs.len(),
        stop_reason: Some(trace.stop_reason),
        wall_time: 0.0,
    })
}

/// Identity of a search: a checkpoint only resumes a search with an equal
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub dataset_sha256: String,
    pub target: String,
    pub universe: Vec<String>,
    pub seed: u64,
    pub min_size: usize,
    pub max_size: usize,
    pub eval_scope: EvalScope,
    pub train: TrainConfig,
    pub mi: MiConfig,
}

const CHECKPOINT_FORMAT: &str = "relvar-checkpoint";
const RANKING_FORMAT: &str = "relvar-ranking";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    #[serde(flatten)]
    manifest: Manifest,
}

/// One line of a checkpoint or ranking file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub subset: String,
    pub raw_mi: Option<f64>,
    pub mi_nats: Option<f64>,
    pub pearson: Option<f64>,
    pub delta: Option<f64>,
    pub test_rms: Option<f64>,
    pub epochs: usize,
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn from_result(r: &SearchResult, with_wall_time: bool) -> Self {
        let (status, error) = match &r.status {
            JobStatus::Ok => ("ok".to_string(), None),
            JobStatus::Failed(e) => ("failed".to_string(), Some(e.clone())),
        };
        ResultRecord {
            subset: r.subset.canonical(),
            raw_mi: r.score.map(|s| s.raw_mi),
            mi_nats: r.score.map(|s| s.mi_nats),
            pearson: r.score.map(|s| s.pearson),
            delta: r.score.map(|s| s.delta),
            test_rms: r.test_rms,
            epochs: r.epochs,
            stop_reason: r.stop_reason,
            wall_time: with_wall_time.then_some(r.wall_time),
            status,
            error,
        }
    }

    pub fn into_result(self, universe: Arc<[String]>) -> Result<SearchResult, String> {
        let subset = FeatureSubset::parse(universe, &self.subset).map_err(|e| e.to_string())?;
        let status = match (self.status.as_str(), self.error) {
            ("ok", _) => JobStatus::Ok,
            ("failed", e) => JobStatus::Failed(e.unwrap_or_default()),
            (s, _) => return Err(format!("unknown status {s:?}")),
        };
        let score = match (status == JobStatus::Ok, self.raw_mi, self.mi_nats, self.pearson, self.delta) {
            (true, Some(raw_mi), Some(mi_nats), Some(pearson), Some(delta)) => Some(DependenceScore {
                mi_nats,
                raw_mi,
                pearson,
                delta,
            }),
            (true, ..) => return Err("successful record without a complete score".into()),
            (false, ..) => None,
        };
        Ok(SearchResult {
            subset,
            status,
            score,
            test_rms: self.test_rms,
            epochs: self.epochs,
            stop_reason: self.stop_reason,
            wall_time: self.wall_time.unwrap_or(0.0),
        })
    }
}

fn header_json(format: &str, manifest: &Manifest) -> String {
    serde_json::to_string(&HeaderLine {
        format: format.to_string(),
        version: FORMAT_VERSION,
        manifest: manifest.clone(),
    })
    .expect("manifest serializes")
}

fn record_json(r: &SearchResult, with_wall_time: bool) -> String {
    serde_json::to_string(&ResultRecord::from_result(r, with_wall_time)).expect("record serializes")
}

/// Sorted results of a search plus the manifest that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub results: Vec<SearchResult>,
    pub manifest: Manifest,
}

impl RankingTable {
    pub fn new(mut results: Vec<SearchResult>, manifest: Manifest) -> Self {
        results.sort_by(compare_results);
        RankingTable { results, manifest }
    }

    pub fn failed_count(&self) -> usize {
        self.results.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn best(&self) -> Option<&SearchResult> {
        self.results.first().filter(|r| r.is_ok())
    }

    pub fn get(&self, subset: &FeatureSubset) -> Option<&SearchResult> {
        self.results.iter().find(|r| r.subset.mask() == subset.mask())
    }

    /// Manifest header line followed by the sorted records. Wall times are
    /// left out so that equal searches give byte-identical files.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", header_json(RANKING_FORMAT, &self.manifest))?;
        for r in &self.results {
            writeln!(w, "{}", record_json(r, false))?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    /// Reads a ranking or a checkpoint file; records are re-sorted.
    pub fn read<R: BufRead>(r: R) -> Result<Self, SearchError> {
        let malformed = |line: usize, reason: String| SearchError::MalformedRanking { line, reason };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| malformed(1, "empty file".into()))??;
        let header: HeaderLine = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
        if header.format != RANKING_FORMAT && header.format != CHECKPOINT_FORMAT {
            return Err(malformed(1, format!("unknown format {:?}", header.format)));
        }
        let universe: Arc<[String]> = header.manifest.universe.clone().into();
        let mut results = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ResultRecord = serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?;
            results.push(rec.into_result(universe.clone()).map_err(|e| malformed(i + 2, e))?);
        }
        Ok(RankingTable::new(results, header.manifest))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SearchError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Three-column text table of the top `top_n` rows: combination, MI and
/// Pearson correlation to three decimals.
pub fn report_table(table: &RankingTable, top_n: usize) -> String {
    let mut out = String::from("Combination | Mutual Information (MI) | Corr corrcoeff (ρ)\n");
    for r in table.results.iter().take(top_n.max(1)) {
        let _ = writeln!(
            out,
            "{} | {} | {}",
            r.subset.canonical(),
            fmt_metric(r.score.map(|s| s.mi_nats)),
            fmt_metric(r.score.map(|s| s.pearson)),
        );
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    /// Jobs found in the checkpoint when the search started.
    pub resumed: usize,
    pub elapsed: Duration,
}

impl Progress {
    pub fn eta(&self) -> Option<Duration> {
        let fresh = self.done.checked_sub(self.resumed)?;
        if fresh == 0 {
            return None;
        }
        let per_job = self.elapsed.as_secs_f64() / fresh as f64;
        Some(Duration::from_secs_f64(per_job * (self.total - self.done) as f64))
    }
}

pub struct RunOptions<'a> {
    pub workers: usize,
    pub checkpoint: Option<PathBuf>,
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop (with [`SearchError::Interrupted`]) once this many jobs are
    /// recorded in the checkpoint.
    pub stop_after: Option<usize>,
    pub progress: Option<&'a mut dyn FnMut(&Progress)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            checkpoint: None,
            resume: false,
            stop_after: None,
            progress: None,
        }
    }
}

/// Loads finished jobs from a checkpoint. A final line without a newline is a
/// torn write from an interrupted run: it is discarded and truncated away.
fn load_checkpoint(
    path: &Path,
    manifest: &Manifest,
    jobs: &HashMap<u64, usize>,
) -> Result<Vec<SearchResult>, SearchError> {
    let corrupt = |line: usize, reason: String| SearchError::CheckpointCorrupt {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let bytes = std::fs::read(path)?;
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(p) => p + 1,
        None => return Err(corrupt(1, "no complete header line".into())),
    };
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| corrupt(0, e.to_string()))?;
    let mut lines = text.lines();
    let header: HeaderLine = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| corrupt(1, format!("unreadable header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != FORMAT_VERSION {
        return Err(corrupt(1, format!("unexpected format {} v{}", header.format, header.version)));
    }
    if &header.manifest != manifest {
        let reason = if header.manifest.dataset_sha256 != manifest.dataset_sha256 {
            "dataset hash differs".to_string()
        } else {
            "search configuration differs".to_string()
        };
        return Err(SearchError::CheckpointMismatch {
            path: path.to_path_buf(),
            reason,
        });
    }

    let universe: Arc<[String]> = manifest.universe.clone().into();
    let mut seen = vec![false; jobs.len()];
    let mut results = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let rec: ResultRecord = serde_json::from_str(line).map_err(|e| corrupt(lineno, e.to_string()))?;
        let result = rec.into_result(universe.clone()).map_err(|e| corrupt(lineno, e))?;
        let slot = *jobs
            .get(&result.subset.mask())
            .ok_or_else(|| corrupt(lineno, format!("subset {} is not part of this search", result.subset)))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(corrupt(lineno, format!("duplicate subset {}", result.subset)));
        }
        results.push(result);
    }
    if complete < bytes.len() {
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    Ok(results)
}

/// Evaluates every subset of the search on up to `opts.workers` threads.
///
/// The ranking depends only on the data and `spec`; worker count and
/// interruptions do not change it.
pub fn run_search(data: &Dataset, spec: &SearchSpec, mut opts: RunOptions<'_>) -> Result<RankingTable, SearchError> {
    if opts.workers == 0 {
        return Err(SearchError::NoWorkers);
    }
    spec.train.validate()?;
    spec.mi
        .validate()
        .map_err(|e| SearchError::Regressor(RegressorError::Mi(e)))?;
    for col in spec.universe.iter().chain([&spec.target]) {
        data.column(col).map_err(RegressorError::from)?;
    }
    let jobs = spec.jobs()?;
    let total = jobs.len();
    let manifest = spec.manifest(data);
    let index: HashMap<u64, usize> = jobs.iter().enumerate().map(|(i, s)| (s.mask(), i)).collect();

    let mut results = Vec::with_capacity(total);
    let mut writer = match &opts.checkpoint {
        Some(path) if opts.resume && path.exists() => {
            results = load_checkpoint(path, &manifest, &index)?;
            Some(BufWriter::new(OpenOptions::new().append(true).open(path)?))
        }
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{}", header_json(CHECKPOINT_FORMAT, &manifest))?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let resumed = results.len();
    let mut finished = vec![false; total];
    for r in &results {
        finished[index[&r.subset.mask()]] = true;
    }
    let pending: Vec<&FeatureSubset> = jobs.iter().zip(&finished).filter(|(_, &f)| !f).map(|(j, _)| j).collect();

    let stop_after = opts.stop_after;
    let limit_hit = |done: usize| stop_after.is_some_and(|n| done >= n);
    if !pending.is_empty() && limit_hit(results.len()) {
        return Err(SearchError::Interrupted { completed: results.len(), total });
    }

    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let cancel = AtomicBool::new(false);
    let mut interrupted = false;
    let mut io_error: Option<io::Error> = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<SearchResult>();
        for _ in 0..opts.workers.min(pending.len()) {
            let tx = tx.clone();
            let (pending, next, cancel) = (&pending, &next, &cancel);
            scope.spawn(move || loop {
                if cancel.load(atomic::Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, atomic::Ordering::Relaxed);
                let Some(subset) = pending.get(i) else { break };
                let r = evaluate_subset(subset, data, &spec.target, &spec.train, &spec.mi, spec.eval_scope);
                if tx.send(r).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for r in rx.iter() {
            if let Some(w) = writer.as_mut() {
                let line = record_json(&r, true);
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    io_error = Some(e);
                    cancel.store(true, atomic::Ordering::Relaxed);
                    break;
                }
            }
            results.push(r);
            if let Some(cb) = opts.progress.as_mut() {
                cb(&Progress {
                    done: results.len(),
                    total,
                    resumed,
                    elapsed: start.elapsed(),
                });
            }
            if results.len() < total && limit_hit(results.len()) {
                interrupted = true;
                cancel.store(true, atomic::Ordering::Relaxed);
                break;
            }
        }
    });

    if let Some(e) = io_error {
        return Err(e.into());
    }
    if interrupted {
        return Err(SearchError::Interrupted {
            completed: results.len(),
            total,
        });
    }
    Ok(RankingTable::new(results, manifest))
}
