//! Tabular ingest, fill-value cleaning, synthetic datasets and the bias
//! histogram.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The fifteen MODIS-side candidate regressors, in their customary order.
pub const MAPSS_REGRESSORS: [&str; 15] = [
    "AOD0550",
    "AOD0470",
    "AOD0660",
    "mref0470",
    "mref0550",
    "surfre0660",
    "surfre0470",
    "surfre2100",
    "cfrac",
    "QAavg",
    "SolarZenith",
    "SolarAzimuth",
    "SensorZenith",
    "SensorAzimuth",
    "ScatteringAngle",
];

/// Ground-truth target column of the MAPSS layout.
pub const MAPSS_TARGET: &str = "AERONET_AOD";

pub const DEFAULT_FILL_VALUES: [f64; 2] = [-9999.0, -999.0];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("duplicate column \"{0}\"")]
    DuplicateColumn(String),
    #[error("unparsable cell {value:?} at row {row}, column \"{column}\"")]
    UnparsableCell { row: usize, column: String, value: String },
    #[error("file has no data")]
    EmptyFile,
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("cleaning dropped all {0} rows")]
    AllRowsDropped(usize),
    #[error("column \"{name}\" has {found} values, expected {expected}")]
    ColumnLength { name: String, expected: usize, found: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid generator {0:?}")]
    InvalidGenerator(String),
    #[error("number of bins must be >= 1")]
    InvalidBins,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

/// Rows removed by [`clean`], by reason.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub dropped_non_finite: usize,
    /// `(sentinel, rows dropped)` in the order the sentinels were given.
    pub dropped_fill: Vec<(f64, usize)>,
}

impl CleanReport {
    pub fn dropped(&self) -> usize {
        self.rows_in - self.rows_out
    }
}

impl fmt::Display for CleanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kept {}/{} rows; dropped {} non-finite",
            self.rows_out, self.rows_in, self.dropped_non_finite
        )?;
        for (v, n) in &self.dropped_fill {
            write!(f, ", {n} fill {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    /// Source path or synthetic spec description.
    pub source: String,
    /// Extra columns skipped at load time because they were not numeric.
    pub skipped_columns: Vec<String>,
    pub cleaning: Option<CleanReport>,
}

/// Column-labelled numeric table. Columns all have the same length and
/// unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    rows: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, provenance: Provenance) -> Result<Self, DataError> {
        let rows = columns.first().map_or(0, |c| c.values.len());
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::DuplicateColumn(c.name.clone()));
            }
            if c.values.len() != rows {
                return Err(DataError::ColumnLength {
                    name: c.name.clone(),
                    expected: rows,
                    found: c.values.len(),
                });
            }
        }
        Ok(Dataset {
            columns,
            rows,
            provenance,
        })
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&[f64], DataError> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    /// New dataset holding the given rows, in the given order.
    pub fn take_rows(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(DataError::RowOutOfRange {
                index: bad,
                rows: self.rows,
            });
        }
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                values: indices.iter().map(|&i| c.values[i]).collect(),
            })
            .collect();
        Ok(Dataset {
            columns,
            rows: indices.len(),
            provenance: self.provenance.clone(),
        })
    }

    /// Row-major matrix of the named columns.
    pub fn row_matrix(&self, names: &[&str]) -> Result<Vec<f64>, DataError> {
        let cols = names
            .iter()
            .map(|n| self.column(n))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            out.extend(cols.iter().map(|c| c[r]));
        }
        Ok(out)
    }

    /// SHA-256 over column names and the bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.columns.len() as u64).to_le_bytes());
        h.update((self.rows as u64).to_le_bytes());
        for c in &self.columns {
            h.update((c.name.len() as u64).to_le_bytes());
            h.update(c.name.as_bytes());
            for v in &c.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes a header row and one line per row. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.names())?;
        let mut buf = Vec::with_capacity(self.columns.len());
        for r in 0..self.rows {
            buf.clear();
            buf.extend(self.columns.iter().map(|c| c.values[r].to_string()));
            w.write_record(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(io::BufWriter::new(file))
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() {
        // an empty cell is a missing value; clean() drops the row
        return Some(f64::NAN);
    }
    t.parse::<f64>().ok()
}

/// Reads a comma-separated file with a header row.
///
/// Every `schema` column must be present and numeric. Other columns are kept
/// when every cell parses as a number and skipped otherwise. Empty cells are
/// read as NaN.
pub fn load_csv(path: impl AsRef<Path>, schema: &[&str]) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv(file, schema)?;
    ds.provenance.source = path.display().to_string();
    Ok(ds)
}

pub fn read_csv<R: io::Read>(input: R, schema: &[&str]) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::EmptyFile);
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    for name in schema {
        if !seen.contains(name) {
            return Err(DataError::MissingColumn(name.to_string()));
        }
    }
    let required: Vec<bool> = headers.iter().map(|h| schema.contains(&h.as_str())).collect();

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    let mut numeric = vec![true; headers.len()];
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row number (header is row 0)
        let row = i + 1;
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        for (c, raw) in record.iter().enumerate() {
            if !numeric[c] {
                continue;
            }
            match parse_cell(raw) {
                Some(v) => values[c].push(v),
                None if required[c] => {
                    return Err(DataError::UnparsableCell {
                        row,
                        column: headers[c].clone(),
                        value: raw.to_string(),
                    })
                }
                None => {
                    numeric[c] = false;
                    values[c] = Vec::new();
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::EmptyFile);
    }

    let mut columns = Vec::new();
    let mut skipped = Vec::new();
    for ((name, vals), ok) in headers.into_iter().zip(values).zip(numeric) {
        if ok {
            columns.push(Column { name, values: vals });
        } else {
            skipped.push(name);
        }
    }
    Dataset::new(
        columns,
        Provenance {
            source: "<reader>".into(),
            skipped_columns: skipped,
            cleaning: None,
        },
    )
}

/// Drops every row holding NaN, an infinity or one of `fill_values` in any
/// of `columns` (all columns when `None`). Survivors keep their order.
pub fn clean(
    data: &Dataset,
    fill_values: &[f64],
    columns: Option<&[&str]>,
) -> Result<(Dataset, CleanReport), DataError> {
    let checked: Vec<&[f64]> = match columns {
        Some(names) => names.iter().map(|n| data.column(n)).collect::<Result<_, _>>()?,
        None => data.columns.iter().map(|c| c.values.as_slice()).collect(),
    };
    let mut report = CleanReport {
        rows_in: data.row_count(),
        dropped_fill: fill_values.iter().map(|&v| (v, 0)).collect(),
        ..CleanReport::default()
    };
    let mut keep = Vec::with_capacity(data.row_count());
    'rows: for r in 0..data.row_count() {
        if checked.iter().any(|c| !c[r].is_finite()) {
            report.dropped_non_finite += 1;
            continue;
        }
        for (slot, &fill) in report.dropped_fill.iter_mut().zip(fill_values) {
            if checked.iter().any(|c| c[r] == fill) {
                slot.1 += 1;
                continue 'rows;
            }
        }
        keep.push(r);
    }
    if keep.is_empty() {
        return Err(DataError::AllRowsDropped(data.row_count()));
    }
    report.rows_out = keep.len();
    let mut out = data.take_rows(&keep)?;
    out.provenance.cleaning = Some(report.clone());
    Ok((out, report))
}

/// Target function of a synthetic dataset. Feature indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `x_k`
    Identity(usize),
    /// `intercept + sum slope_i x_i`
    Affine { terms: Vec<(usize, f64)>, intercept: f64 },
    /// `sin(3 x_a) + 2 x_b x_c`
    SinMix(usize, usize, usize),
    /// `sin(3 x_a) x_b`
    SinProduct(usize, usize),
}

impl Generator {
    /// Features the target depends on, ascending and deduplicated.
    pub fn relevant(&self) -> Vec<usize> {
        let mut v = match self {
            Generator::Identity(k) => vec![*k],
            Generator::Affine { terms, .. } => terms.iter().map(|t| t.0).collect(),
            Generator::SinMix(a, b, c) => vec![*a, *b, *c],
            Generator::SinProduct(a, b) => vec![*a, *b],
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Evaluates on a row of features (`x[0]` is feature 1).
    pub fn eval(&self, x: &[f64]) -> f64 {
        let f = |k: usize| x[k - 1];
        match self {
            Generator::Identity(k) => f(*k),
            Generator::Affine { terms, intercept } => {
                terms.iter().fold(*intercept, |acc, &(k, s)| acc + s * f(k))
            }
            Generator::SinMix(a, b, c) => (3.0 * f(*a)).sin() + 2.0 * f(*b) * f(*c),
            Generator::SinProduct(a, b) => (3.0 * f(*a)).sin() * f(*b),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Identity(k) => write!(f, "identity:{k}"),
            Generator::Affine { terms, intercept } => {
                write!(f, "affine:{intercept}")?;
                for (k, s) in terms {
                    write!(f, ",{k}={s}")?;
                }
                Ok(())
            }
            Generator::SinMix(a, b, c) => write!(f, "sin-mix:{a},{b},{c}"),
            Generator::SinProduct(a, b) => write!(f, "sin-product:{a},{b}"),
        }
    }
}

/// Parses `identity:K`, `affine:C,K=S,...`, `sin-mix:A,B,C` or
/// `sin-product:A,B`.
impl FromStr for Generator {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidGenerator(s.to_string());
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let idx = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = args.split(',').collect();
        match (kind.trim(), parts.as_slice()) {
            ("identity", [k]) => Ok(Generator::Identity(idx(k)?)),
            ("sin-mix", [a, b, c]) => Ok(Generator::SinMix(idx(a)?, idx(b)?, idx(c)?)),
            ("sin-product", [a, b]) => Ok(Generator::SinProduct(idx(a)?, idx(b)?)),
            ("affine", [c, rest @ ..]) if !rest.is_empty() => {
                let intercept = c.trim().parse().map_err(|_| bad())?;
                let terms = rest
                    .iter()
                    .map(|t| {
                        let (k, s) = t.split_once('=').ok_or_else(bad)?;
                        Ok((idx(k)?, s.trim().parse().map_err(|_| bad())?))
                    })
                    .collect::<Result<_, DataError>>()?;
                Ok(Generator::Affine { terms, intercept })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_features: usize,
    pub generator: Generator,
    pub noise_sigma: f64,
    pub n_rows: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub const TARGET: &'static str = "target";

    pub fn relevant(&self) -> Vec<usize> {
        self.generator.relevant()
    }

    pub fn feature_name(k: usize) -> String {
        format!("x{k}")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_features == 0 || self.n_rows == 0 {
            return Err(DataError::InvalidSpec("n_features and n_rows must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if let Some(k) = self.relevant().into_iter().find(|&k| k == 0 || k > self.n_features) {
            return Err(DataError::InvalidSpec(format!(
                "generator uses feature {k} outside 1..={}",
                self.n_features
            )));
        }
        Ok(())
    }
}

/// Features are iid uniform on [0, 1); the target is the generator plus
/// Gaussian noise. Output is a pure function of the spec.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let mut features = vec![Vec::with_capacity(spec.n_rows); spec.n_features];
    let mut target = Vec::with_capacity(spec.n_rows);
    let mut row = vec![0.0; spec.n_features];
    for _ in 0..spec.n_rows {
        for v in row.iter_mut() {
            *v = rng.random::<f64>();
        }
        let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        target.push(spec.generator.eval(&row) + eps);
        for (col, &v) in features.iter_mut().zip(&row) {
            col.push(v);
        }
    }
    let mut columns: Vec<Column> = features
        .into_iter()
        .enumerate()
        .map(|(i, values)| Column {
            name: SynthSpec::feature_name(i + 1),
            values,
        })
        .collect();
    columns.push(Column {
        name: SynthSpec::TARGET.into(),
        values: target,
    });
    Dataset::new(
        columns,
        Provenance {
            source: format!(
                "synthetic: {} features, generator {}, sigma {}, {} rows, seed {}",
                spec.n_features, spec.generator, spec.noise_sigma, spec.n_rows, spec.seed
            ),
            ..Provenance::default()
        },
    )
}

/// Equal-width histogram. Bins are left-closed except the last, which is
/// closed on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn equal_width(values: impl IntoIterator<Item = f64>, n_bins: usize) -> Result<Self, DataError> {
        if n_bins == 0 {
            return Err(DataError::InvalidBins);
        }
        let finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        let (mut lo, mut hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if finite.is_empty() {
            (lo, hi) = (0.0, 1.0);
        } else if lo == hi {
            // zero span: centre a unit-wide range on the single value
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let width = (hi - lo) / n_bins as f64;
        let mut bin_edges: Vec<f64> = (0..n_bins).map(|i| lo + i as f64 * width).collect();
        bin_edges.push(hi);

        let mut counts = vec![0usize; n_bins];
        for v in finite {
            let mut b = (((v - lo) / width).floor() as usize).min(n_bins - 1);
            while b > 0 && v < bin_edges[b] {
                b -= 1;
            }
            while b + 1 < n_bins && v >= bin_edges[b + 1] {
                b += 1;
            }
            counts[b] += 1;
        }
        Ok(Histogram { bin_edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Two-column CSV: `bin_left_edge,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_left_edge", "count"])?;
        for (edge, count) in self.bin_edges.iter().zip(&self.counts) {
            w.write_record([edge.to_string(), count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of `col_a - col_b` over `n_bins` bins spanning the observed
/// range of the differences.
pub fn bias_histogram(data: &Dataset, col_a: &str, col_b: &str, n_bins: usize) -> Result<Histogram, DataError> {
    let a = data.column(col_a)?;
    let b = data.column(col_b)?;
    Histogram::equal_width(a.iter().zip(b).map(|(x, y)| x - y), n_bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(cols: &[(&str, &[f64])]) -> Dataset {
        Dataset::new(
            cols.iter()
                .map(|(n, v)| Column {
                    name: n.to_string(),
                    values: v.to_vec(),
                })
                .collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    fn mapss_header() -> String {
        let mut cols: Vec<&str> = MAPSS_REGRESSORS.to_vec();
        cols.push(MAPSS_TARGET);
        cols.join(",")
    }

    fn mapss_schema() -> Vec<&'static str> {
        let mut cols: Vec<&str> = MAPSS_REGRESSORS.to_vec();
        cols.push(MAPSS_TARGET);
        cols
    }

    #[test]
    fn load_two_rows() {
        let row = vec!["0.5"; 16].join(",");
        let text = format!("{}\n{row}\n{row}\n", mapss_header());
        let d = read_csv(text.as_bytes(), &mapss_schema()).unwrap();
        assert_eq!(d.row_count(), 2);
        assert_eq!(d.columns().len(), 16);
    }

    #[test]
    fn load_missing_column() {
        let header = mapss_header().replace("cfrac,", "");
        let row = vec!["0.5"; 15].join(",");
        let err = read_csv(format!("{header}\n{row}\n").as_bytes(), &mapss_schema()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(ref c) if c == "cfrac"), "{err}");
    }

    #[test]
    fn load_unparsable_cell() {
        let text = "a,b\n1,2\n3,abc\n";
        match read_csv(text.as_bytes(), &["a", "b"]).unwrap_err() {
            DataError::UnparsableCell { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "b", "abc"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_keeps_extra_numeric_and_skips_text() {
        let text = "site,a,extra\nfoo,1,2\nbar,3,4\n";
        let d = read_csv(text.as_bytes(), &["a"]).unwrap();
        assert_eq!(d.names().collect::<Vec<_>>(), ["a", "extra"]);
        assert_eq!(d.provenance.skipped_columns, ["site"]);
        assert_eq!(d.column("extra").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn load_empty() {
        assert!(matches!(read_csv("".as_bytes(), &[]), Err(DataError::EmptyFile)));
        assert!(matches!(read_csv("a,b\n".as_bytes(), &["a"]), Err(DataError::EmptyFile)));
    }

    #[test]
    fn clean_cases() {
        let d = ds(&[("a", &[1.0, 2.0, 3.0]), ("QAavg", &[1.0, 1.0, 1.0])]);
        let (c, r) = clean(&d, &DEFAULT_FILL_VALUES, None).unwrap();
        assert_eq!(c.columns(), d.columns());
        assert_eq!(r.dropped(), 0);

        let d = ds(&[("a", &[1.0, 2.0, 3.0]), ("QAavg", &[1.0, -9999.0, 1.0])]);
        let (c, r) = clean(&d, &DEFAULT_FILL_VALUES, None).unwrap();
        assert_eq!(c.column("a").unwrap(), &[1.0, 3.0]);
        assert_eq!(r.dropped_fill, vec![(-9999.0, 1), (-999.0, 0)]);

        let d = ds(&[("a", &[-9999.0, f64::NAN]), ("b", &[0.0, 0.0])]);
        assert!(matches!(clean(&d, &DEFAULT_FILL_VALUES, None), Err(DataError::AllRowsDropped(2))));
    }

    #[test]
    fn clean_only_checks_requested_columns() {
        let d = ds(&[("a", &[1.0, 2.0]), ("b", &[f64::NAN, 0.0])]);
        let (c, _) = clean(&d, &[], Some(&["a"])).unwrap();
        assert_eq!(c.row_count(), 2);
        let (c, r) = clean(&d, &[], Some(&["a", "b"])).unwrap();
        assert_eq!(c.row_count(), 1);
        assert_eq!(r.dropped_non_finite, 1);
    }

    #[test]
    fn clean_is_idempotent() {
        let d = ds(&[("a", &[1.0, -999.0, 3.0, f64::INFINITY]), ("b", &[0.0, 1.0, 2.0, 3.0])]);
        let (once, _) = clean(&d, &DEFAULT_FILL_VALUES, None).unwrap();
        let (twice, r) = clean(&once, &DEFAULT_FILL_VALUES, None).unwrap();
        assert_eq!(once.columns(), twice.columns());
        assert_eq!(r.dropped(), 0);
    }

    #[test]
    fn synth_identity_noiseless() {
        let spec = SynthSpec {
            n_features: 3,
            generator: Generator::Identity(1),
            noise_sigma: 0.0,
            n_rows: 100,
            seed: 4,
        };
        let d = synth_generate(&spec).unwrap();
        assert_eq!(d.column("target").unwrap(), d.column("x1").unwrap());
        assert_eq!(d, synth_generate(&spec).unwrap());
    }

    #[test]
    fn synth_rejects_out_of_range_feature() {
        let spec = SynthSpec {
            n_features: 2,
            generator: Generator::SinMix(1, 3, 5),
            noise_sigma: 0.1,
            n_rows: 10,
            seed: 0,
        };
        assert!(matches!(synth_generate(&spec), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn generator_parse_display() {
        for s in ["identity:2", "sin-mix:1,3,5", "sin-product:1,2", "affine:1,1=2"] {
            let g: Generator = s.parse().unwrap();
            assert_eq!(g.to_string(), s);
        }
        assert_eq!(
            "affine:1,1=2".parse::<Generator>().unwrap().eval(&[0.25]),
            1.5
        );
        assert!("bogus:1".parse::<Generator>().is_err());
        assert!("sin-mix:1,2".parse::<Generator>().is_err());
    }

    #[test]
    fn histogram_edge_convention() {
        let h = Histogram::equal_width([-1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(h.bin_edges, vec![-1.0, 0.0, 1.0]);
        assert_eq!(h.counts, vec![1, 2]);
    }

    #[test]
    fn histogram_identical_columns() {
        let d = ds(&[("a", &[0.3, 0.1, 0.7]), ("b", &[0.3, 0.1, 0.7])]);
        let h = bias_histogram(&d, "a", "b", 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let bin = h.counts.iter().position(|&c| c > 0).unwrap();
        assert!(h.bin_edges[bin] <= 0.0 && 0.0 < h.bin_edges[bin + 1]);
        assert_eq!(h.total(), 3);
        assert!(matches!(bias_histogram(&d, "a", "zz", 3), Err(DataError::MissingColumn(_))));
        assert!(matches!(bias_histogram(&d, "a", "b", 0), Err(DataError::InvalidBins)));
    }

    #[test]
    fn histogram_skips_non_finite() {
        let h = Histogram::equal_width([0.0, f64::NAN, 1.0, 2.0], 4).unwrap();
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn histogram_export() {
        let h = Histogram::equal_width([-1.0, 0.0, 1.0], 2).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin_left_edge,count\n-1,1\n0,2\n");
    }
}
