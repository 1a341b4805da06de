//! Dependence measures between two scalar series.
//!
//! The mutual information estimator works on the rank-transformed sample and
//! recursively refines a partition of the unit square. A cell is split into
//! four at the within-cell marginal medians and the split is kept only when a
//! chi-square test rejects uniformity of the four sub-counts. The estimate is
//! then the plug-in sum over terminal cells of `p ln(p / (w_x w_y))`.
//!
//! Median quadrants always have balanced margins, so their statistic only
//! detects dependence inside the cell. A cell whose points are independent but
//! piled up towards one corner still violates the uniform-density assumption
//! of the plug-in sum, and leaving it terminal biases the estimate low on
//! strongly dependent data. With [`MiConfig::midpoint_test`] set, the split is
//! also kept when quadrants cut at the cell's geometric midpoints reject
//! uniformity. The root cell is split unconditionally unless
//! [`MiConfig::force_root_split`] is cleared.
//!
//! All quantities are in nats.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiError {
    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("too few samples: got {got}, need at least {required}")]
    TooFewSamples { got: usize, required: usize },
    #[error("mutual information must be non-negative, got {0}")]
    NegativeMi(f64),
    #[error("|rho| = {0} >= 1: gaussian mutual information diverges")]
    DegenerateCorrelation(f64),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
}

/// An ordered list of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries(Vec<f64>);

impl ScalarSeries {
    pub fn new(values: Vec<f64>) -> Result<Self, MiError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MiError::NonFinite { index, value });
        }
        Ok(ScalarSeries(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ScalarSeries {
    type Error = MiError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        ScalarSeries::new(values)
    }
}

impl TryFrom<&[f64]> for ScalarSeries {
    type Error = MiError;

    fn try_from(values: &[f64]) -> Result<Self, Self::Error> {
        ScalarSeries::new(values.to_vec())
    }
}

/// Mutual information, Pearson correlation and the normalized dependence
/// `delta = sqrt(1 - exp(-2 mi_nats))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceScore {
    pub mi_nats: f64,
    /// Estimator output before clamping at zero.
    pub raw_mi: f64,
    pub pearson: f64,
    pub delta: f64,
}

impl fmt::Display for DependenceScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mi={:.4} nats (raw {:.4}), rho={:.4}, delta={:.4}",
            self.mi_nats, self.raw_mi, self.pearson, self.delta
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiConfig {
    /// Split acceptance threshold for the 3-dof uniformity statistic.
    pub chi2_threshold: f64,
    /// Cells holding fewer points than this are never split.
    pub min_cell_count: usize,
    pub clamp_negative: bool,
    /// Also keep a split when the four quadrants at the cell's geometric
    /// midpoints reject uniformity at `chi2_threshold`.
    pub midpoint_test: bool,
    /// Always split the root cell. Its median quadrants carry exactly equal
    /// mass, so the test alone never sees symmetric dependence such as `y = x^2`.
    pub force_root_split: bool,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            chi2_threshold: 7.815,
            min_cell_count: 8,
            clamp_negative: true,
            midpoint_test: true,
            force_root_split: true,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<(), MiError> {
        if !(self.chi2_threshold.is_finite() && self.chi2_threshold > 0.0) {
            return Err(MiError::InvalidConfig(format!(
                "chi2_threshold must be > 0, got {}",
                self.chi2_threshold
            )));
        }
        if self.min_cell_count < 4 {
            return Err(MiError::InvalidConfig(format!(
                "min_cell_count must be >= 4, got {}",
                self.min_cell_count
            )));
        }
        Ok(())
    }

    /// Smallest sample size accepted by [`mutual_information`].
    pub fn min_samples(&self) -> usize {
        4 * self.min_cell_count
    }
}

fn check_lengths(x: &ScalarSeries, y: &ScalarSeries) -> Result<(), MiError> {
    if x.len() != y.len() {
        return Err(MiError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(())
}

/// Pearson correlation with population (1/N) moments, clamped to [-1, 1].
pub fn pearson_correlation(x: &ScalarSeries, y: &ScalarSeries) -> Result<f64, MiError> {
    check_lengths(x, y)?;
    let n = x.len();
    if n < 2 {
        return Err(MiError::TooFewSamples { got: n, required: 2 });
    }
    let nf = n as f64;
    let mean_x = x.values().iter().sum::<f64>() / nf;
    let mean_y = y.values().iter().sum::<f64>() / nf;
    let (mut cov, mut var_x, mut var_y) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.values().iter().zip(y.values()) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(MiError::ZeroVariance);
    }
    let rho = (cov / nf) / ((var_x / nf).sqrt() * (var_y / nf).sqrt());
    Ok(rho.clamp(-1.0, 1.0))
}

/// Zero-based ranks, ties broken by original index.
fn ranks(values: &[f64]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so equal values keep index order
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u32; values.len()];
    for (rank, &idx) in order.iter().enumerate() {
        ranks[idx] = rank as u32;
    }
    ranks
}

/// Maps each value to `(rank - 0.5) / N` with ranks in `1..=N`.
pub fn rank_transform(x: &ScalarSeries) -> ScalarSeries {
    let n = x.len() as f64;
    ScalarSeries(
        ranks(x.values())
            .into_iter()
            .map(|r| (r as f64 + 0.5) / n)
            .collect(),
    )
}

/// Maps mutual information onto a correlation-like scale in [0, 1).
pub fn normalized_dependence(mi_nats: f64) -> Result<f64, MiError> {
    if mi_nats.is_nan() || mi_nats < 0.0 {
        return Err(MiError::NegativeMi(mi_nats));
    }
    Ok((-(-2.0 * mi_nats).exp_m1()).sqrt())
}

/// Mutual information of a bivariate normal with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> Result<f64, MiError> {
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(MiError::DegenerateCorrelation(rho));
    }
    Ok(-0.5 * (-rho * rho).ln_1p())
}

/// One node of an adaptive partition.
///
/// Bounds are stored in half-rank units: the point of zero-based rank `r`
/// sits at `2r + 1`, and the unit square spans `0..2N` on each axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionCell {
    pub x_range: (u64, u64),
    pub y_range: (u64, u64),
    pub count: usize,
    /// Indices into [`Partition::cells`] in the order
    /// (low x, low y), (low x, high y), (high x, low y), (high x, high y).
    pub children: Option<[usize; 4]>,
}

impl PartitionCell {
    pub fn is_terminal(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    n: usize,
    cells: Vec<PartitionCell>,
}

impl Partition {
    pub fn sample_size(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[PartitionCell] {
        &self.cells
    }

    pub fn root(&self) -> &PartitionCell {
        &self.cells[0]
    }

    pub fn terminal_cells(&self) -> impl Iterator<Item = &PartitionCell> {
        self.cells.iter().filter(|c| c.is_terminal())
    }

    /// Width of a cell's x interval on the unit rank axis.
    pub fn width_x(&self, cell: &PartitionCell) -> f64 {
        (cell.x_range.1 - cell.x_range.0) as f64 / (2 * self.n) as f64
    }

    pub fn width_y(&self, cell: &PartitionCell) -> f64 {
        (cell.y_range.1 - cell.y_range.0) as f64 / (2 * self.n) as f64
    }

    /// Plug-in estimate over terminal cells.
    ///
    /// Terms are summed in sorted order so the result does not depend on the
    /// traversal order of the tree, which keeps the estimate exactly
    /// symmetric under swapping the axes.
    pub fn mi_estimate(&self) -> f64 {
        let n = self.n as f64;
        let mut terms: Vec<f64> = self
            .terminal_cells()
            .filter(|c| c.count > 0)
            .map(|c| {
                let p = c.count as f64 / n;
                let area = self.width_x(c) * self.width_y(c);
                p * (p / area).ln()
            })
            .collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum()
    }
}

struct Partitioner<'a> {
    cfg: &'a MiConfig,
    cells: Vec<PartitionCell>,
    scratch: Vec<u32>,
}

/// Uniformity statistic of four counts summing to `n`:
/// `sum (n_i - n/4)^2 / (n/4) == 4 sum n_i^2 / n - n`.
/// The integer part is exact, so the value does not depend on count order.
fn quadrant_statistic(counts: &[usize; 4], n: usize) -> f64 {
    let sum_sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
    (4 * sum_sq) as f64 / n as f64 - n as f64
}

/// Half-rank position of the point with zero-based rank `r`.
fn centre(r: u32) -> u64 {
    2 * r as u64 + 1
}

impl Partitioner<'_> {
    /// Boundary between the lower `n/2` points and the rest along one axis.
    fn median_boundary(&mut self, coords: impl Iterator<Item = u32>) -> u64 {
        self.scratch.clear();
        self.scratch.extend(coords);
        let half = self.scratch.len() / 2;
        let (lower, upper, _) = self.scratch.select_nth_unstable(half);
        let below = *lower.iter().max().expect("cell has at least two points");
        // midpoint between centres 2a+1 and 2b+1
        below as u64 + *upper as u64 + 1
    }

    fn split_counts(points: &[(u32, u32)], xm: u64, ym: u64) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &(x, y) in points {
            counts[2 * (centre(x) > xm) as usize + (centre(y) > ym) as usize] += 1;
        }
        counts
    }

    fn build(&mut self, points: &mut [(u32, u32)], x_range: (u64, u64), y_range: (u64, u64)) -> usize {
        let id = self.cells.len();
        self.cells.push(PartitionCell {
            x_range,
            y_range,
            count: points.len(),
            children: None,
        });
        let n = points.len();
        if n < self.cfg.min_cell_count || n < 2 {
            return id;
        }

        let xm = self.median_boundary(points.iter().map(|p| p.0));
        let ym = self.median_boundary(points.iter().map(|p| p.1));
        let counts = Self::split_counts(points, xm, ym);
        let mut keep =
            (id == 0 && self.cfg.force_root_split) || quadrant_statistic(&counts, n) >= self.cfg.chi2_threshold;
        if !keep && self.cfg.midpoint_test {
            // median quadrants only see dependence; midpoint quadrants also
            // see a non-uniform density inside the cell
            let mid = Self::split_counts(points, (x_range.0 + x_range.1) / 2, (y_range.0 + y_range.1) / 2);
            keep = quadrant_statistic(&mid, n) >= self.cfg.chi2_threshold;
        }
        if !keep {
            return id;
        }

        let quadrant = |p: &(u32, u32)| 2 * (centre(p.0) > xm) as usize + (centre(p.1) > ym) as usize;
        points.sort_unstable_by_key(quadrant);
        let mut rest = points;
        let mut children = [0usize; 4];
        for (q, child) in children.iter_mut().enumerate() {
            let (head, tail) = rest.split_at_mut(counts[q]);
            rest = tail;
            let xr = if q / 2 == 0 { (x_range.0, xm) } else { (xm, x_range.1) };
            let yr = if q % 2 == 0 { (y_range.0, ym) } else { (ym, y_range.1) };
            *child = self.build(head, xr, yr);
        }
        self.cells[id].children = Some(children);
        id
    }
}

/// Builds the adaptive partition of the rank-transformed sample.
pub fn adaptive_partition(x: &ScalarSeries, y: &ScalarSeries, cfg: &MiConfig) -> Result<Partition, MiError> {
    cfg.validate()?;
    check_lengths(x, y)?;
    let n = x.len();
    if n < cfg.min_samples() {
        return Err(MiError::TooFewSamples {
            got: n,
            required: cfg.min_samples(),
        });
    }
    let mut points: Vec<(u32, u32)> = ranks(x.values()).into_iter().zip(ranks(y.values())).collect();
    let mut partitioner = Partitioner {
        cfg,
        cells: Vec::new(),
        scratch: Vec::with_capacity(n),
    };
    let full = (0, 2 * n as u64);
    partitioner.build(&mut points, full, full);
    Ok(Partition {
        n,
        cells: partitioner.cells,
    })
}

/// Adaptive-partition mutual information together with Pearson correlation
/// and the normalized dependence.
pub fn mutual_information(x: &ScalarSeries, y: &ScalarSeries, cfg: &MiConfig) -> Result<DependenceScore, MiError> {
    let partition = adaptive_partition(x, y, cfg)?;
    let raw_mi = partition.mi_estimate();
    let mi_nats = if cfg.clamp_negative { raw_mi.max(0.0) } else { raw_mi };
    let pearson = pearson_correlation(x, y)?;
    // an unclamped negative estimate has no real-valued delta
    let delta = normalized_dependence(mi_nats.max(0.0))?;
    Ok(DependenceScore {
        mi_nats,
        raw_mi,
        pearson,
        delta,
    })
}

/// Total order used when ranking scores: higher MI first, then higher rho.
pub fn compare_scores(a: &DependenceScore, b: &DependenceScore) -> Ordering {
    b.mi_nats
        .total_cmp(&a.mi_nats)
        .then_with(|| b.pearson.total_cmp(&a.pearson))
}
