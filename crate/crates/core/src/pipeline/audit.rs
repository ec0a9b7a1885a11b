use serde::{Deserialize, Serialize};

use super::{CorrectionConfig, Evaluator, Slot, Stage, Stat};
use crate::data::Dataset;
use crate::error::PipelineError;
use crate::metrics::{impossibility_check, FairnessDefinition, ImpossibilityCheck};
use crate::tiers::{ThresholdMatrix, Tier, TierLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub definition: FairnessDefinition,
    pub slot: Slot,
    pub stage: Stage,
    pub stat: Stat,
}

/// Subsample counts of each impossibility outcome at one tier and stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImpossibilityTally {
    pub not_applicable: usize,
    pub not_balanced: usize,
    pub holds: usize,
    pub violated: usize,
}

impl ImpossibilityTally {
    fn add(&mut self, check: ImpossibilityCheck) {
        match check {
            ImpossibilityCheck::NotApplicable => self.not_applicable += 1,
            ImpossibilityCheck::NotBalanced => self.not_balanced += 1,
            ImpossibilityCheck::Holds => self.holds += 1,
            ImpossibilityCheck::Violated => self.violated += 1,
        }
    }
}

/// Direction of change between the pre and post thresholds. All vectors are
/// empty when no post thresholds were given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditFlags {
    /// Tiers where mean ERB rose while mean PP fell.
    pub erb_up_pp_down: Vec<Tier>,
    /// Labels whose mean CAL fell.
    pub cal_down: Vec<TierLabel>,
    /// Indexed by tier, then stage.
    pub impossibility: Vec<[ImpossibilityTally; 2]>,
}

impl AuditFlags {
    pub fn impossibility_violations(&self) -> usize {
        self.impossibility.iter().flatten().map(|t| t.violated).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub subsamples: usize,
    pub rows: Vec<AuditRow>,
    pub flags: AuditFlags,
    pub optimism_caveat: bool,
}

impl AuditReport {
    pub fn get(&self, def: FairnessDefinition, slot: Slot, stage: Stage) -> Option<&Stat> {
        self.rows
            .iter()
            .find(|r| r.definition == def && r.slot == slot && r.stage == stage)
            .map(|r| &r.stat)
    }
}

/// All nine definitions on the evaluation subsamples, at `pre` and, when
/// given, at `post`.
pub fn audit(
    dataset: &Dataset,
    pre: &ThresholdMatrix,
    post: Option<&ThresholdMatrix>,
    cfg: &CorrectionConfig,
) -> Result<AuditReport, PipelineError> {
    let evaluator = Evaluator::new(dataset, cfg)?;
    audit_with(&evaluator, pre, post)
}

pub(crate) fn audit_with(
    evaluator: &Evaluator,
    pre: &ThresholdMatrix,
    post: Option<&ThresholdMatrix>,
) -> Result<AuditReport, PipelineError> {
    let groups = evaluator.groups();
    let pre = pre.aligned_to(groups)?;
    let post = post.map(|m| m.aligned_to(groups)).transpose()?;
    let mut rows = Vec::new();
    for def in FairnessDefinition::ALL {
        let e = evaluator.evaluate_definition(def, 0.0, &pre, post.as_ref().unwrap_or(&pre))?;
        for f in &e.fairness {
            rows.push(AuditRow {
                definition: def,
                slot: f.slot,
                stage: Stage::Pre,
                stat: f.pre,
            });
            if post.is_some() {
                rows.push(AuditRow {
                    definition: def,
                    slot: f.slot,
                    stage: Stage::Post,
                    stat: f.post,
                });
            }
        }
    }

    let mut flags = AuditFlags::default();
    let stages: Vec<&ThresholdMatrix> = std::iter::once(&pre).chain(post.as_ref()).collect();
    for tier in Tier::ALL {
        let mut tally = [ImpossibilityTally::default(); 2];
        for view in evaluator.views() {
            for (s, m) in stages.iter().enumerate() {
                tally[s].add(impossibility_check(&view.counts_at(m.tier(tier))?));
            }
        }
        flags.impossibility.push(tally);
    }
    if post.is_some() {
        let mean = |def, slot, stage| rows.iter().find(|r: &&AuditRow| r.definition == def && r.slot == slot && r.stage == stage).and_then(|r| r.stat.mean);
        let fell = |def, slot| matches!((mean(def, slot, Stage::Pre), mean(def, slot, Stage::Post)), (Some(a), Some(b)) if b < a);
        let rose = |def, slot| matches!((mean(def, slot, Stage::Pre), mean(def, slot, Stage::Post)), (Some(a), Some(b)) if b > a);
        for tier in Tier::ALL {
            let slot = Slot::Tier(tier);
            if rose(FairnessDefinition::ERB, slot) && fell(FairnessDefinition::PP, slot) {
                flags.erb_up_pp_down.push(tier);
            }
        }
        for label in TierLabel::ALL {
            if fell(FairnessDefinition::CAL, Slot::Label(label)) {
                flags.cal_down.push(label);
            }
        }
    }
    Ok(AuditReport {
        subsamples: evaluator.views().len(),
        rows,
        flags,
        optimism_caveat: true,
    })
}
