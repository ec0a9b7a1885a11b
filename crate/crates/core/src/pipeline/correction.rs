use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_guarded, CorrectionConfig, CORRECTION_STREAM};
use crate::data::Dataset;
use crate::error::PipelineError;
use crate::metrics::{delta_changed, SubsampleView};
use crate::optimizer::{agnostic_tiers, calibration_objective, solve_subsample};
use crate::tiers::{AgnosticTiers, ConstraintViolation, ThresholdMatrix, Tier};

/// Bagged thresholds for one weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub w: f64,
    /// Bagged shared cuts, replicated across groups.
    pub pre: ThresholdMatrix,
    /// Bagged group cuts.
    pub post: ThresholdMatrix,
    /// Constraint failures introduced by averaging.
    pub violations: Vec<ConstraintViolation>,
    /// Changed proportion at each subsample's own optimum: one value per
    /// tier, or a single value for calibration.
    pub search_changed: Vec<Vec<f64>>,
}

/// Correction subsamples and their shared cuts, drawn once and reused for
/// every weight.
pub struct Corrector<'a> {
    dataset: &'a Dataset,
    cfg: CorrectionConfig,
    views: Vec<SubsampleView>,
    anchors: Vec<AgnosticTiers>,
    /// Index of the first subsample identical to each one. Without repeated
    /// entities every subsample is the whole dataset and is solved once.
    first_copy: Vec<usize>,
    pre: ThresholdMatrix,
}

impl<'a> Corrector<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &CorrectionConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let drawn: Vec<(SubsampleView, AgnosticTiers)> = (0..cfg.subsamples)
            .into_par_iter()
            .map(|i| {
                let view = draw_guarded(dataset, cfg, CORRECTION_STREAM, i)?;
                let anchors =
                    agnostic_tiers(&view).map_err(|source| PipelineError::Optimize { subsample: i, source })?;
                Ok((view, anchors))
            })
            .collect::<Result<_, PipelineError>>()?;
        let (views, anchors): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();
        let bagged = AgnosticTiers::mean(&anchors).expect("at least one subsample");
        let pre = ThresholdMatrix::replicated(dataset.groups().to_vec(), bagged);
        let first_copy = (0..views.len())
            .map(|i| (0..i).find(|&j| views[j] == views[i]).unwrap_or(i))
            .collect();
        Ok(Corrector {
            dataset,
            cfg: cfg.clone(),
            views,
            anchors,
            first_copy,
            pre,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn config(&self) -> &CorrectionConfig {
        &self.cfg
    }

    /// Shared cuts bagged over the correction subsamples.
    pub fn pre(&self) -> &ThresholdMatrix {
        &self.pre
    }

    pub fn subsample_anchors(&self) -> &[AgnosticTiers] {
        &self.anchors
    }

    pub fn correct(&self, w: f64) -> Result<CorrectionResult, PipelineError> {
        let def = self.cfg.definition;
        let opts = self.cfg.search_options();
        let distinct: Vec<usize> = (0..self.views.len()).filter(|&i| self.first_copy[i] == i).collect();
        let solved: Vec<(ThresholdMatrix, Vec<f64>)> = distinct
            .par_iter()
            .map(|&i| {
                let (view, anchors) = (&self.views[i], &self.anchors[i]);
                let wrap = |source| PipelineError::Optimize { subsample: i, source };
                let m = solve_subsample(view, def, w, anchors, &opts).map_err(wrap)?;
                let changed = if def.is_calibration() {
                    let full = calibration_objective(view, 1.0, &m).map_err(wrap)?;
                    vec![full.penalty_term]
                } else {
                    Tier::ALL
                        .iter()
                        .map(|&t| delta_changed(view, anchors.get(t), m.tier(t)))
                        .collect::<Result<_, _>>()?
                };
                Ok((m, changed))
            })
            .collect::<Result<_, PipelineError>>()?;
        let slot = |i: usize| distinct.binary_search(&self.first_copy[i]).expect("first copy is distinct");
        let solved: Vec<(ThresholdMatrix, Vec<f64>)> = (0..self.views.len()).map(|i| solved[slot(i)].clone()).collect();
        let (matrices, search_changed): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
        let post = ThresholdMatrix::mean(&matrices).expect("at least one subsample");
        let violations = post.violations(0.0);
        Ok(CorrectionResult {
            w,
            pre: self.pre.clone(),
            post,
            violations,
            search_changed,
        })
    }
}

/// Draws the correction subsamples and bags thresholds for a single weight.
pub fn run_correction(dataset: &Dataset, cfg: &CorrectionConfig, w: f64) -> Result<CorrectionResult, PipelineError> {
    Corrector::new(dataset, cfg)?
        .correct(w)
        .map_err(|e| PipelineError::AtWeight { w, source: Box::new(e) })
}
