//! Group-specific tier cuts that trade a fairness measure against the share
//! of units whose tier changes.
//!
//! A risk score in `[0, 1]` is split into four ordinal tiers by three cuts.
//! The shared cuts come from the score distribution; [`optimizer`] then
//! searches per-group cuts, the pipeline bags them over subsamples and
//! evaluates them on fresh ones.

pub mod data;
pub mod error;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod tiers;

pub use data::{Dataset, SampleRecord};
pub use error::{DataError, MetricsError, OptimizeError, PipelineError, TierError};
pub use metrics::{FairnessDefinition, FairnessMeasure, SubsampleView};
pub use tiers::{AgnosticTiers, ThresholdMatrix, Tier, TierLabel};
