//! Bagged correction, fresh-subsample evaluation, weight sweeps and audits.
//!
//! Correction subsamples and evaluation subsamples come from separate random
//! streams of the same seed, so selection noise and assessment noise are
//! decoupled while every byte of output stays reproducible. Evaluating on the
//! same dataset that was corrected is optimistic; reports carry a flag saying
//! so.

mod audit;
mod correction;
mod evaluation;
pub mod export;
mod sweep;

pub use audit::{audit, AuditFlags, AuditReport, AuditRow};
pub use correction::{run_correction, CorrectionResult, Corrector};
pub use evaluation::{evaluate, Evaluator, FairnessSummary, PerformanceSummary, WeightEvaluation};
pub use sweep::{select_best_w, sweep, BestWeight, MonotonicityCheck, SweepEntry, SweepFailure, SweepReport};

use serde::{Deserialize, Serialize};

use crate::data::{draw_subsample, stream_rng, Dataset};
use crate::error::PipelineError;
use crate::metrics::{FairnessDefinition, SubsampleView};
use crate::optimizer::{SearchOptions, DEFAULT_EPSILON};
use crate::tiers::{Tier, TierLabel};

pub(crate) const CORRECTION_STREAM: u64 = 1;
pub(crate) const EVALUATION_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub definition: FairnessDefinition,
    /// Subsamples bagged per weight.
    pub subsamples: usize,
    /// Fresh subsamples used for evaluation and audits.
    pub evaluation_subsamples: usize,
    pub w_grid: Vec<f64>,
    pub seed: u64,
    /// Each group needs at least this many adverse and non-adverse units in
    /// every subsample.
    pub min_group_count: usize,
    pub epsilon: f64,
    /// Redraws allowed for a subsample failing the group guard.
    pub resample_cap: usize,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            definition: FairnessDefinition::ERB,
            subsamples: 200,
            evaluation_subsamples: 200,
            w_grid: uniform_grid(101),
            seed: 0,
            min_group_count: 1,
            epsilon: DEFAULT_EPSILON,
            resample_cap: 100,
        }
    }
}

/// `points` evenly spaced weights from 0 to 1 inclusive.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, message: String| {
            Err(PipelineError::Config {
                field: field.into(),
                message,
            })
        };
        if self.subsamples == 0 {
            return bad("subsamples", "must be at least 1".into());
        }
        if self.evaluation_subsamples == 0 {
            return bad("evaluation_subsamples", "must be at least 1".into());
        }
        if self.w_grid.is_empty() {
            return bad("w_grid", "must not be empty".into());
        }
        for (i, &w) in self.w_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return bad(&format!("w_grid[{i}]"), format!("{w} is outside [0, 1]"));
            }
            if i > 0 && w <= self.w_grid[i - 1] {
                return bad(&format!("w_grid[{i}]"), "values must be strictly ascending".into());
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return bad("epsilon", format!("{} is outside (0, 1e-3)", self.epsilon));
        }
        if self.min_group_count == 0 {
            return bad("min_group_count", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            epsilon: self.epsilon,
            ..SearchOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Post,
}

impl Stage {
    pub fn code(self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Post => "post",
        }
    }
}

/// Where a fairness value is measured: at one cut, or within one tier label
/// for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Slot {
    Tier(Tier),
    Label(TierLabel),
}

impl Slot {
    pub fn code(self) -> &'static str {
        match self {
            Slot::Tier(t) => t.code(),
            Slot::Label(l) => l.code(),
        }
    }

    /// Slots a definition is measured at.
    pub fn for_definition(def: FairnessDefinition) -> Vec<Slot> {
        if def.is_calibration() {
            TierLabel::ALL.into_iter().map(Slot::Label).collect()
        } else {
            Tier::ALL.into_iter().map(Slot::Tier).collect()
        }
    }
}

/// Mean and sample standard deviation (divisor `n - 1`) of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_defined: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Stat {
        let defined: Vec<f64> = values.into_iter().flatten().collect();
        let n = defined.len();
        if n == 0 {
            return Stat {
                mean: None,
                sd: None,
                n_defined: 0,
            };
        }
        // Identical values are reported exactly, without summation noise.
        if defined.iter().all(|&x| x == defined[0]) {
            return Stat {
                mean: Some(defined[0]),
                sd: (n > 1).then_some(0.0),
                n_defined: n,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = defined.iter().map(|x| (x - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Stat {
            mean: Some(mean),
            sd,
            n_defined: n,
        }
    }
}

/// Draws subsample `index` of `stream`, redrawing from the same stream while
/// some group lacks enough adverse or non-adverse units.
pub(crate) fn draw_guarded(
    dataset: &Dataset,
    cfg: &CorrectionConfig,
    stream: u64,
    index: usize,
) -> Result<SubsampleView, PipelineError> {
    let (mut rng, tag) = stream_rng(cfg.seed, stream, index as u64);
    let attempts = cfg.resample_cap + 1;
    let mut last = None;
    for _ in 0..attempts {
        let subsample = draw_subsample(dataset, &mut rng, tag)?;
        let view = SubsampleView::new(dataset, &subsample);
        let short = (0..view.group_count()).find_map(|g| {
            let s = view.group(g);
            let (pos, neg) = (s.adverse(), s.len() - s.adverse());
            (pos < cfg.min_group_count || neg < cfg.min_group_count).then_some((g, pos, neg))
        });
        match short {
            None => return Ok(view),
            Some(found) => last = Some(found),
        }
    }
    let (g, positives, negatives) = last.expect("at least one attempt");
    Err(PipelineError::GuardViolation {
        group: dataset.groups()[g].clone(),
        positives,
        negatives,
        required: cfg.min_group_count,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_statistics() {
        let s = Stat::of([Some(0.6), Some(0.8)]);
        assert!((s.mean.unwrap() - 0.7).abs() < 1e-15);
        // Sample SD of two points is |a - b| / sqrt(2).
        assert!((s.sd.unwrap() - 0.2 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.n_defined, 2);
        let one = Stat::of([Some(0.5), None]);
        assert_eq!((one.mean, one.sd, one.n_defined), (Some(0.5), None, 1));
        assert_eq!(Stat::of([None]).mean, None);
    }

    #[test]
    fn default_grid_has_101_points() {
        let cfg = CorrectionConfig::default();
        assert_eq!(cfg.w_grid.len(), 101);
        assert_eq!(cfg.w_grid[100], 1.0);
        assert!((cfg.w_grid[17] - 0.17).abs() < 1e-15);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = CorrectionConfig {
            w_grid: vec![0.0, 0.5, 0.4],
            ..CorrectionConfig::default()
        };
        match cfg.validate() {
            Err(PipelineError::Config { field, .. }) => assert_eq!(field, "w_grid[2]"),
            other => panic!("{other:?}"),
        }
        cfg.w_grid = vec![1.5];
        assert!(cfg.validate().is_err());
        cfg.w_grid = vec![0.5];
        cfg.subsamples = 0;
        match cfg.validate() {
            Err(PipelineError::Config { field, .. }) => assert_eq!(field, "subsamples"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = CorrectionConfig {
            definition: FairnessDefinition::CUAE,
            w_grid: vec![0.0, 0.25],
            ..CorrectionConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"CUAE\""));
        let back: CorrectionConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: CorrectionConfig = serde_json::from_str(r#"{"subsamples": 5}"#).unwrap();
        assert_eq!(partial.subsamples, 5);
        assert_eq!(partial.evaluation_subsamples, 200);
        assert!(serde_json::from_str::<CorrectionConfig>(r#"{"subsample": 5}"#).is_err());
    }
}
