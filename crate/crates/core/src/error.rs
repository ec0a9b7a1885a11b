use thiserror::Error;

use crate::tiers::Tier;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TierError {
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("unknown tier `{0}` (expected L, A or H)")]
    UnknownTier(String),
    #[error("agnostic cuts must satisfy low < average < high, got {low}, {average}, {high}")]
    UnorderedAnchors { low: f64, average: f64, high: f64 },
    #[error("tier {tier} has {found} cuts, expected {expected}")]
    ShapeMismatch {
        tier: Tier,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("input is empty")]
    EmptyInput,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("no group has at least {min_size} records; nothing to merge into")]
    Unmergeable { min_size: usize },
    #[error("group `{0}` is not in the vocabulary")]
    UnknownGroup(String),
    #[error("group `{0}` is declared but has no records")]
    EmptyGroup(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("group `{0}` is not present")]
    UnknownGroup(String),
    #[error("rates must be non-negative, got {0}")]
    NegativeRate(f64),
    #[error("expected {expected} per-group thresholds, got {found}")]
    ThresholdCount { expected: usize, found: usize },
    #[error("calibration is measured per tier label, not at a single cut")]
    CalibrationNeedsMatrix,
    #[error("scope is empty")]
    EmptyScope,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("degenerate score distribution: {0}")]
    DegenerateScores(String),
    #[error("penalty weight must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("tier {tier}: no feasible cut for group `{group}` (lower {lower} >= upper {upper})")]
    Infeasible {
        tier: Tier,
        group: String,
        lower: f64,
        upper: f64,
    },
    #[error("tier {tier}: the starting point violates coveredness")]
    InfeasibleCoverage { tier: Tier },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("after {attempts} draws a subsample still has group `{group}` with {positives} positive and {negatives} negative outcomes (need {required} of each)")]
    GuardViolation {
        group: String,
        positives: usize,
        negatives: usize,
        required: usize,
        attempts: usize,
    },
    #[error("subsample {subsample}: {source}")]
    Optimize {
        subsample: usize,
        #[source]
        source: OptimizeError,
    },
    #[error("w = {w}: {source}")]
    AtWeight {
        w: f64,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("no defined fairness values for {0}; cannot select a weight")]
    NothingToSelect(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("thresholds file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported thresholds file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
