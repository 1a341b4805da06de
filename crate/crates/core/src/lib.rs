//! Relevant-variable discovery by exhaustive subset search.
//!
//! For every subset of candidate regressor columns a small neural network is
//! trained to predict a target column; the agreement between predicted and
//! observed targets is scored with adaptive-partition mutual information and
//! Pearson correlation, and subsets are ranked by that score.
//!
//! * [`data`]: CSV ingest, fill-value cleaning, synthetic datasets, bias histograms.
//! * [`mi`]: mutual information, Pearson correlation and normalized dependence.
//! * [`regressor`]: one-hidden-layer network trained by Levenberg–Marquardt.
//! * [`search`]: subset enumeration, parallel evaluation, checkpoints and ranking.
//! * [`cli`]: the `relvar` command line.

pub mod cli;
pub mod data;
pub mod mi;
pub mod regressor;
pub mod search;

pub use data::{Dataset, SynthSpec};
pub use mi::{DependenceScore, MiConfig, ScalarSeries};
pub use regressor::{MlpModel, TrainConfig, TrainTrace};
pub use search::{FeatureSubset, RankingTable, SearchResult, SearchSpec};
