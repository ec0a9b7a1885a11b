use serde::{Deserialize, Serialize};

use super::{CorrectionConfig, CorrectionResult, Corrector, Evaluator, Slot, WeightEvaluation};
use crate::data::Dataset;
use crate::error::PipelineError;
use crate::metrics::FairnessDefinition;
use crate::tiers::{ThresholdMatrix, Tier};

const SELECTION_TOLERANCE: f64 = 1e-12;
const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub correction: CorrectionResult,
    pub evaluation: WeightEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub w: f64,
    pub message: String,
}

/// Counts of subsample optima whose changed proportion rose from one weight
/// to the next larger one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityCheck {
    pub tolerance: f64,
    pub checked: usize,
    pub violations: usize,
}

/// Selected weight for one slot; `slot` is `None` when calibration picks a
/// single weight for all four labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestWeight {
    pub slot: Option<Slot>,
    pub w: f64,
    pub pre_mean: Option<f64>,
    pub post_mean: f64,
    pub post_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub definition: FairnessDefinition,
    pub seed: u64,
    pub groups: Vec<String>,
    /// Bagged shared cuts; identical for every weight.
    pub pre: ThresholdMatrix,
    pub entries: Vec<SweepEntry>,
    pub failures: Vec<SweepFailure>,
    pub best: Vec<BestWeight>,
    pub monotonicity: MonotonicityCheck,
    /// Evaluation reuses the corrected dataset, so results are optimistic.
    pub optimism_caveat: bool,
}

impl SweepReport {
    pub fn entry(&self, w: f64) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.correction.w == w)
    }

    /// Thresholds at the selected weights: per tier for tier-wise
    /// definitions, one weight for calibration.
    pub fn selected(&self) -> ThresholdMatrix {
        let at = |w: f64| &self.entry(w).expect("selected weight has an entry").correction.post;
        if let [BestWeight { slot: None, w, .. }] = self.best.as_slice() {
            return at(*w).clone();
        }
        let column = |tier: Tier| {
            let best = self
                .best
                .iter()
                .find(|b| b.slot == Some(Slot::Tier(tier)))
                .expect("every tier selected");
            at(best.w).tier(tier).to_vec()
        };
        ThresholdMatrix::new(
            self.groups.clone(),
            column(Tier::Low),
            column(Tier::Average),
            column(Tier::High),
            self.pre.anchors(),
        )
        .expect("shapes agree")
    }
}

/// Bagged correction and evaluation at every weight of the grid. A failing
/// weight is recorded and skipped.
pub fn sweep(dataset: &Dataset, cfg: &CorrectionConfig) -> Result<SweepReport, PipelineError> {
    let corrector = Corrector::new(dataset, cfg)?;
    let evaluator = Evaluator::new(dataset, cfg)?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for &w in &cfg.w_grid {
        let run = corrector
            .correct(w)
            .and_then(|c| Ok((evaluator.evaluate(w, &c.pre, &c.post)?, c)));
        match run {
            Ok((evaluation, correction)) => entries.push(SweepEntry { correction, evaluation }),
            Err(e) => failures.push(SweepFailure {
                w,
                message: e.to_string(),
            }),
        }
    }
    if entries.is_empty() {
        let detail = failures.first().map_or(String::new(), |f| format!(": {}", f.message));
        return Err(PipelineError::NothingToSelect(format!("every weight failed{detail}")));
    }
    let evaluations: Vec<WeightEvaluation> = entries.iter().map(|e| e.evaluation.clone()).collect();
    let best = select_best_w(&evaluations)?;
    let monotonicity = monotonicity(&entries);
    Ok(SweepReport {
        definition: cfg.definition,
        seed: cfg.seed,
        groups: dataset.groups().to_vec(),
        pre: corrector.pre().clone(),
        entries,
        failures,
        best,
        monotonicity,
        optimism_caveat: true,
    })
}

fn monotonicity(entries: &[SweepEntry]) -> MonotonicityCheck {
    let mut check = MonotonicityCheck {
        tolerance: MONOTONE_TOLERANCE,
        checked: 0,
        violations: 0,
    };
    for pair in entries.windows(2) {
        let (a, b) = (&pair[0].correction.search_changed, &pair[1].correction.search_changed);
        for (da, db) in a.iter().zip(b) {
            for (x, y) in da.iter().zip(db) {
                check.checked += 1;
                if *y > *x + MONOTONE_TOLERANCE {
                    check.violations += 1;
                }
            }
        }
    }
    check
}

struct Candidate {
    w: f64,
    pre_mean: Option<f64>,
    mean: f64,
    sd: f64,
    reported_sd: Option<f64>,
}

/// Highest mean post-correction fairness; ties go to the smallest standard
/// deviation, then to the largest weight. The result does not depend on the
/// order of `candidates`.
fn pick(candidates: &[Candidate]) -> Option<&Candidate> {
    let top = candidates.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
    let near_top = || candidates.iter().filter(move |c| c.mean >= top - SELECTION_TOLERANCE);
    let least_sd = near_top().map(|c| c.sd).fold(f64::INFINITY, f64::min);
    near_top()
        .filter(|c| c.sd <= least_sd + SELECTION_TOLERANCE || c.sd == least_sd)
        .max_by(|a, b| a.w.total_cmp(&b.w))
}

/// Best weight per tier, or one weight for calibration chosen by the mean
/// over its four labels.
pub fn select_best_w(evaluations: &[WeightEvaluation]) -> Result<Vec<BestWeight>, PipelineError> {
    let first = evaluations
        .first()
        .ok_or_else(|| PipelineError::NothingToSelect("empty report".into()))?;
    let def = first.definition;
    let slots = Slot::for_definition(def);
    let sd_key = |sd: Option<f64>| sd.unwrap_or(f64::INFINITY);
    if def.is_calibration() {
        let candidates: Vec<Candidate> = evaluations
            .iter()
            .filter_map(|e| {
                let rows: Vec<_> = slots.iter().map(|&s| e.fairness_at(s)).collect::<Option<_>>()?;
                let means: Vec<f64> = rows.iter().map(|r| r.post.mean).collect::<Option<_>>()?;
                let sds: Option<Vec<f64>> = rows.iter().map(|r| r.post.sd).collect();
                let pres: Option<Vec<f64>> = rows.iter().map(|r| r.pre.mean).collect();
                let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let reported_sd = sds.as_deref().map(avg);
                Some(Candidate {
                    w: e.w,
                    pre_mean: pres.as_deref().map(avg),
                    mean: avg(&means),
                    sd: sd_key(reported_sd),
                    reported_sd,
                })
            })
            .collect();
        let c = pick(&candidates).ok_or_else(|| PipelineError::NothingToSelect("calibration bins".into()))?;
        return Ok(vec![BestWeight {
            slot: None,
            w: c.w,
            pre_mean: c.pre_mean,
            post_mean: c.mean,
            post_sd: c.reported_sd,
        }]);
    }
    slots
        .iter()
        .map(|&slot| {
            let candidates: Vec<Candidate> = evaluations
                .iter()
                .filter_map(|e| {
                    let row = e.fairness_at(slot)?;
                    Some(Candidate {
                        w: e.w,
                        pre_mean: row.pre.mean,
                        mean: row.post.mean?,
                        sd: sd_key(row.post.sd),
                        reported_sd: row.post.sd,
                    })
                })
                .collect();
            let c = pick(&candidates).ok_or_else(|| PipelineError::NothingToSelect(format!("tier {}", slot.code())))?;
            Ok(BestWeight {
                slot: Some(slot),
                w: c.w,
                pre_mean: c.pre_mean,
                post_mean: c.mean,
                post_sd: c.reported_sd,
            })
        })
        .collect()
}
