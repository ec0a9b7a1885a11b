use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_guarded, CorrectionConfig, Slot, Stage, Stat, EVALUATION_STREAM};
use crate::data::Dataset;
use crate::error::PipelineError;
use crate::metrics::{
    calibration_measure, fairness_from_counts, flips_in_group, ConfusionCounts, FairnessDefinition, FairnessMeasure,
    PerformanceMeasure, SubsampleView,
};
use crate::tiers::{ThresholdMatrix, Tier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    pub slot: Slot,
    pub pre: Stat,
    pub post: Stat,
    /// Share of units whose side of the cut (tier, for calibration) differs
    /// between the pre and post thresholds.
    pub changed: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub tier: Tier,
    /// `None` for all groups pooled.
    pub group: Option<String>,
    pub measure: PerformanceMeasure,
    pub pre: Stat,
    pub post: Stat,
}

/// Pre and post measurements for one weight across the evaluation
/// subsamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEvaluation {
    pub w: f64,
    pub definition: FairnessDefinition,
    pub subsamples: usize,
    pub fairness: Vec<FairnessSummary>,
    pub performance: Vec<PerformanceSummary>,
    /// Times a group's constituent was undefined and left out, keyed
    /// `slot/stage/group/constituent`.
    pub undefined: BTreeMap<String, usize>,
}

impl WeightEvaluation {
    pub fn fairness_at(&self, slot: Slot) -> Option<&FairnessSummary> {
        self.fairness.iter().find(|f| f.slot == slot)
    }

    pub fn performance_at(&self, tier: Tier, group: Option<&str>, measure: PerformanceMeasure) -> Option<&PerformanceSummary> {
        self.performance
            .iter()
            .find(|p| p.tier == tier && p.group.as_deref() == group && p.measure == measure)
    }
}

/// Evaluation subsamples, drawn once and shared by every evaluated matrix.
pub struct Evaluator {
    cfg: CorrectionConfig,
    groups: Vec<String>,
    views: Vec<SubsampleView>,
}

/// Raw measurements on one subsample.
struct Measured {
    fairness: Vec<[Option<f64>; 2]>,
    changed: Vec<f64>,
    /// `[tier][group or pooled][measure][stage]`; pooled is the last index.
    performance: Vec<Vec<Vec<[Option<f64>; 2]>>>,
    undefined: Vec<String>,
}

impl Evaluator {
    pub fn new(dataset: &Dataset, cfg: &CorrectionConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let views = (0..cfg.evaluation_subsamples)
            .into_par_iter()
            .map(|j| draw_guarded(dataset, cfg, EVALUATION_STREAM, j))
            .collect::<Result<_, _>>()?;
        Ok(Evaluator {
            cfg: cfg.clone(),
            groups: dataset.groups().to_vec(),
            views,
        })
    }

    pub fn views(&self) -> &[SubsampleView] {
        &self.views
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    /// Measures `def` at `pre` and `post` on every evaluation subsample.
    pub fn evaluate_definition(
        &self,
        def: FairnessDefinition,
        w: f64,
        pre: &ThresholdMatrix,
        post: &ThresholdMatrix,
    ) -> Result<WeightEvaluation, PipelineError> {
        let pre = pre.aligned_to(&self.groups)?;
        let post = post.aligned_to(&self.groups)?;
        let slots = Slot::for_definition(def);
        let measured: Vec<Measured> = self
            .views
            .par_iter()
            .map(|view| measure(view, def, &slots, &pre, &post))
            .collect::<Result<_, PipelineError>>()?;

        let fairness = slots
            .iter()
            .enumerate()
            .map(|(s, &slot)| FairnessSummary {
                slot,
                pre: Stat::of(measured.iter().map(|m| m.fairness[s][0])),
                post: Stat::of(measured.iter().map(|m| m.fairness[s][1])),
                changed: Stat::of(measured.iter().map(|m| Some(m.changed[s]))),
            })
            .collect();
        let mut performance = Vec::new();
        for (t, tier) in Tier::ALL.into_iter().enumerate() {
            for g in 0..=self.groups.len() {
                for (k, measure) in PerformanceMeasure::ALL.into_iter().enumerate() {
                    performance.push(PerformanceSummary {
                        tier,
                        group: self.groups.get(g).cloned(),
                        measure,
                        pre: Stat::of(measured.iter().map(|m| m.performance[t][g][k][0])),
                        post: Stat::of(measured.iter().map(|m| m.performance[t][g][k][1])),
                    });
                }
            }
        }
        let mut undefined = BTreeMap::new();
        for key in measured.iter().flat_map(|m| &m.undefined) {
            *undefined.entry(key.clone()).or_insert(0) += 1;
        }
        Ok(WeightEvaluation {
            w,
            definition: def,
            subsamples: self.views.len(),
            fairness,
            performance,
            undefined,
        })
    }

    /// Measures the configured definition.
    pub fn evaluate(&self, w: f64, pre: &ThresholdMatrix, post: &ThresholdMatrix) -> Result<WeightEvaluation, PipelineError> {
        self.evaluate_definition(self.cfg.definition, w, pre, post)
    }
}

fn measure(
    view: &SubsampleView,
    def: FairnessDefinition,
    slots: &[Slot],
    pre: &ThresholdMatrix,
    post: &ThresholdMatrix,
) -> Result<Measured, PipelineError> {
    let k = view.group_count();
    let stages = [(Stage::Pre, pre), (Stage::Post, post)];
    let mut undefined = Vec::new();
    let mut note = |slot: Slot, stage: Stage, m: &FairnessMeasure| {
        for u in &m.undefined {
            undefined.push(format!("{}/{}/{}/{}", slot.code(), stage.code(), u.group, u.constituent));
        }
    };
    let counts: Vec<[Vec<ConfusionCounts>; 2]> = Tier::ALL
        .iter()
        .map(|&t| Ok([view.counts_at(pre.tier(t))?, view.counts_at(post.tier(t))?]))
        .collect::<Result<_, PipelineError>>()?;

    let mut fairness = Vec::with_capacity(slots.len());
    let mut changed = Vec::with_capacity(slots.len());
    for &slot in slots {
        let mut pair = [None, None];
        for (s, (stage, matrix)) in stages.iter().enumerate() {
            let m = match slot {
                Slot::Tier(t) => fairness_from_counts(def, view.groups(), &counts[t.index()][s])?,
                Slot::Label(label) => calibration_measure(view, matrix, label)?,
            };
            note(slot, *stage, &m);
            pair[s] = m.value;
        }
        fairness.push(pair);
        let flipped: usize = match slot {
            Slot::Tier(t) => (0..k)
                .map(|g| flips_in_group(view.group(g), pre.get(t, g), post.get(t, g)))
                .sum(),
            Slot::Label(_) => (0..k)
                .map(|g| view.group(g).tier_changes(pre.group_cuts(g), post.group_cuts(g)))
                .sum(),
        };
        changed.push(flipped as f64 / view.len() as f64);
    }

    let performance = counts
        .iter()
        .map(|by_stage| {
            let pooled = by_stage.each_ref().map(|c| c.iter().fold(ConfusionCounts::default(), |a, &b| a + b));
            (0..=k)
                .map(|g| {
                    let at = |s: usize| if g < k { by_stage[s][g] } else { pooled[s] };
                    let (p0, p1) = (at(0).performance(), at(1).performance());
                    PerformanceMeasure::ALL.iter().map(|&m| [p0.get(m), p1.get(m)]).collect()
                })
                .collect()
        })
        .collect();
    Ok(Measured {
        fairness,
        changed,
        performance,
        undefined,
    })
}

/// Draws the evaluation subsamples and measures one pre/post pair.
pub fn evaluate(
    dataset: &Dataset,
    cfg: &CorrectionConfig,
    w: f64,
    pre: &ThresholdMatrix,
    post: &ThresholdMatrix,
) -> Result<WeightEvaluation, PipelineError> {
    Evaluator::new(dataset, cfg)?.evaluate(w, pre, post)
}
