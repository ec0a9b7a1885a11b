//! Confusion tallies, the nine performance measures, and min-pairwise-ratio
//! fairness measures for nine group-level definitions.
//!
//! A fairness measure compares one or two per-group quantities (its
//! *constituents*) across every pair of groups. Each pairwise comparison is
//! the smaller value over the larger, so it lies in `[0, 1]`; the measure is
//! the minimum over all pairs and constituents. Equal values compare as 1,
//! including two zeros, and zero against a positive value compares as 0.
//! A constituent whose denominator is zero is *undefined*: pairs touching it
//! are left out of the minimum and a warning names the group.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Subsample};
use crate::error::MetricsError;
use crate::tiers::{ThresholdMatrix, TierLabel};

/// Counts at one cut. Predicted positive means `score >= threshold`; actual
/// positive means the adverse event occurred.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Direct per-row tally.
    pub fn tally(rows: impl IntoIterator<Item = (bool, f64)>, threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (outcome, score) in rows {
            match (outcome, score >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn actual_positive(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn actual_negative(&self) -> usize {
        self.fp + self.tn
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }

    pub fn predicted_negative(&self) -> usize {
        self.tn + self.fn_
    }

    pub fn prevalence(&self) -> Option<f64> {
        ratio(self.actual_positive(), self.total())
    }

    pub fn performance(&self) -> PerformanceVector {
        PerformanceVector {
            fnr: ratio(self.fn_, self.actual_positive()),
            tpr: ratio(self.tp, self.actual_positive()),
            fpr: ratio(self.fp, self.actual_negative()),
            tnr: ratio(self.tn, self.actual_negative()),
            ppv: ratio(self.tp, self.predicted_positive()),
            fdr: ratio(self.fp, self.predicted_positive()),
            npv: ratio(self.tn, self.predicted_negative()),
            fom: ratio(self.fn_, self.predicted_negative()),
            acc: ratio(self.tp + self.tn, self.total()),
        }
    }

    #[inline]
    pub fn constituent(&self, c: Constituent) -> Option<f64> {
        match c {
            Constituent::PositiveRate => ratio(self.predicted_positive(), self.total()),
            Constituent::Accuracy => ratio(self.tp + self.tn, self.total()),
            Constituent::Ppv => ratio(self.tp, self.predicted_positive()),
            Constituent::Npv => ratio(self.tn, self.predicted_negative()),
            Constituent::Fnr => ratio(self.fn_, self.actual_positive()),
            Constituent::Fpr => ratio(self.fp, self.actual_negative()),
            Constituent::FpFnRatio => ratio(self.fp, self.fn_),
            Constituent::AdverseRate => ratio(self.actual_positive(), self.total()),
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[inline]
fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// The nine performance measures; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerformanceVector {
    pub fnr: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub fdr: Option<f64>,
    pub npv: Option<f64>,
    pub fom: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PerformanceMeasure {
    Fnr,
    Tpr,
    Fpr,
    Tnr,
    Ppv,
    Fdr,
    Npv,
    Fom,
    Acc,
}

impl PerformanceMeasure {
    pub const ALL: [PerformanceMeasure; 9] = [
        PerformanceMeasure::Fnr,
        PerformanceMeasure::Tpr,
        PerformanceMeasure::Fpr,
        PerformanceMeasure::Tnr,
        PerformanceMeasure::Ppv,
        PerformanceMeasure::Fdr,
        PerformanceMeasure::Npv,
        PerformanceMeasure::Fom,
        PerformanceMeasure::Acc,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PerformanceMeasure::Fnr => "FNR",
            PerformanceMeasure::Tpr => "TPR",
            PerformanceMeasure::Fpr => "FPR",
            PerformanceMeasure::Tnr => "TNR",
            PerformanceMeasure::Ppv => "PPV",
            PerformanceMeasure::Fdr => "FDR",
            PerformanceMeasure::Npv => "NPV",
            PerformanceMeasure::Fom => "FOR",
            PerformanceMeasure::Acc => "ACC",
        }
    }
}

impl PerformanceVector {
    pub fn get(&self, m: PerformanceMeasure) -> Option<f64> {
        match m {
            PerformanceMeasure::Fnr => self.fnr,
            PerformanceMeasure::Tpr => self.tpr,
            PerformanceMeasure::Fpr => self.fpr,
            PerformanceMeasure::Tnr => self.tnr,
            PerformanceMeasure::Ppv => self.ppv,
            PerformanceMeasure::Fdr => self.fdr,
            PerformanceMeasure::Npv => self.npv,
            PerformanceMeasure::Fom => self.fom,
            PerformanceMeasure::Acc => self.acc,
        }
    }
}

/// Per-group quantity compared across groups by a fairness definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constituent {
    /// Share of the group predicted positive.
    PositiveRate,
    Accuracy,
    Ppv,
    Npv,
    Fnr,
    Fpr,
    /// False positives per false negative.
    FpFnRatio,
    /// Observed adverse rate among the group's units in one tier.
    AdverseRate,
}

impl Constituent {
    pub fn code(self) -> &'static str {
        match self {
            Constituent::PositiveRate => "PPR",
            Constituent::Accuracy => "ACC",
            Constituent::Ppv => "PPV",
            Constituent::Npv => "NPV",
            Constituent::Fnr => "FNR",
            Constituent::Fpr => "FPR",
            Constituent::FpFnRatio => "FP/FN",
            Constituent::AdverseRate => "ADVERSE_RATE",
        }
    }
}

impl fmt::Display for Constituent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Group-level fairness definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FairnessDefinition {
    /// Statistical parity.
    SP,
    /// Overall accuracy equality.
    OAE,
    /// Predictive parity.
    PP,
    /// Equal opportunity.
    EO,
    /// Predictive equality.
    PE,
    /// Error rate balance.
    ERB,
    /// Conditional use accuracy equality.
    CUAE,
    /// Treatment equality.
    TE,
    /// Calibration, measured per tier label.
    CAL,
}

impl FairnessDefinition {
    pub const ALL: [FairnessDefinition; 9] = [
        FairnessDefinition::SP,
        FairnessDefinition::OAE,
        FairnessDefinition::PP,
        FairnessDefinition::EO,
        FairnessDefinition::PE,
        FairnessDefinition::ERB,
        FairnessDefinition::CUAE,
        FairnessDefinition::TE,
        FairnessDefinition::CAL,
    ];

    /// The eight definitions measured at a single cut.
    pub const AT_CUT: [FairnessDefinition; 8] = [
        FairnessDefinition::SP,
        FairnessDefinition::OAE,
        FairnessDefinition::PP,
        FairnessDefinition::EO,
        FairnessDefinition::PE,
        FairnessDefinition::ERB,
        FairnessDefinition::CUAE,
        FairnessDefinition::TE,
    ];

    pub fn constituents(self) -> &'static [Constituent] {
        use Constituent::*;
        match self {
            FairnessDefinition::SP => &[PositiveRate],
            FairnessDefinition::OAE => &[Accuracy],
            FairnessDefinition::PP => &[Ppv],
            FairnessDefinition::EO => &[Fnr],
            FairnessDefinition::PE => &[Fpr],
            FairnessDefinition::ERB => &[Fnr, Fpr],
            FairnessDefinition::CUAE => &[Ppv, Npv],
            FairnessDefinition::TE => &[FpFnRatio],
            FairnessDefinition::CAL => &[AdverseRate],
        }
    }

    pub fn is_calibration(self) -> bool {
        self == FairnessDefinition::CAL
    }

    pub fn code(self) -> &'static str {
        match self {
            FairnessDefinition::SP => "SP",
            FairnessDefinition::OAE => "OAE",
            FairnessDefinition::PP => "PP",
            FairnessDefinition::EO => "EO",
            FairnessDefinition::PE => "PE",
            FairnessDefinition::ERB => "ERB",
            FairnessDefinition::CUAE => "CUAE",
            FairnessDefinition::TE => "TE",
            FairnessDefinition::CAL => "CAL",
        }
    }
}

impl fmt::Display for FairnessDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FairnessDefinition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FairnessDefinition::ALL
            .into_iter()
            .find(|d| d.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown fairness definition `{s}`"))
    }
}

/// The pair and constituent that produced the minimum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorstPair {
    pub first: String,
    pub second: String,
    pub constituent: Constituent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedConstituent {
    pub group: String,
    pub constituent: Constituent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessMeasure {
    /// `None` when every pair was undefined.
    pub value: Option<f64>,
    pub worst_pair: Option<WorstPair>,
    pub undefined: Vec<UndefinedConstituent>,
}

impl FairnessMeasure {
    /// Measure from precomputed per-group constituent values, indexed
    /// `values[group][constituent]`.
    pub fn from_values(
        groups: &[String],
        constituents: &[Constituent],
        values: &[Vec<Option<f64>>],
    ) -> Result<FairnessMeasure, MetricsError> {
        for row in values {
            for v in row.iter().flatten() {
                if *v < 0.0 || v.is_nan() {
                    return Err(MetricsError::NegativeRate(*v));
                }
            }
        }
        let k = groups.len().min(values.len());
        let m = min_pairwise(k, constituents.len(), |g, c| values[g].get(c).copied().flatten());
        Ok(m.into_measure(groups, constituents, |g, c| values[g].get(c).copied().flatten()))
    }

    /// `true` when some pair was left out of the minimum.
    pub fn has_warnings(&self) -> bool {
        !self.undefined.is_empty()
    }
}

/// Smaller over larger for two non-negative values of one constituent.
pub fn pairwise_ratio(a: Option<f64>, b: Option<f64>) -> Result<Option<f64>, MetricsError> {
    for v in [a, b].into_iter().flatten() {
        if v < 0.0 || v.is_nan() {
            return Err(MetricsError::NegativeRate(v));
        }
    }
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(ratio_of(a, b)),
        _ => None,
    })
}

#[inline]
fn ratio_of(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if a < b {
        a / b
    } else {
        b / a
    }
}

/// Result of the min-over-pairs scan, without allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseMin {
    pub value: Option<f64>,
    /// `(group, group, constituent)` positions of the minimum.
    pub worst: Option<(usize, usize, usize)>,
    pub defined_pairs: usize,
    pub undefined_pairs: usize,
}

impl PairwiseMin {
    /// Value only when every pair was defined.
    #[inline]
    pub fn strict_value(&self) -> Option<f64> {
        if self.undefined_pairs == 0 {
            self.value
        } else {
            None
        }
    }

    fn into_measure(
        self,
        groups: &[String],
        constituents: &[Constituent],
        value: impl Fn(usize, usize) -> Option<f64>,
    ) -> FairnessMeasure {
        let mut undefined = Vec::new();
        if self.undefined_pairs > 0 {
            for (g, label) in groups.iter().enumerate() {
                for (c, &con) in constituents.iter().enumerate() {
                    if value(g, c).is_none() {
                        undefined.push(UndefinedConstituent {
                            group: label.clone(),
                            constituent: con,
                        });
                    }
                }
            }
        }
        FairnessMeasure {
            value: self.value,
            worst_pair: self.worst.map(|(a, b, c)| WorstPair {
                first: groups[a].clone(),
                second: groups[b].clone(),
                constituent: constituents[c],
            }),
            undefined,
        }
    }
}

/// Scans constituents in order, then pairs `(i, j)` with `i < j`. The first
/// strict minimum wins. With fewer than two groups the value is 1.
#[inline]
pub fn min_pairwise(k: usize, n_constituents: usize, value: impl Fn(usize, usize) -> Option<f64>) -> PairwiseMin {
    let mut out = PairwiseMin {
        value: None,
        worst: None,
        defined_pairs: 0,
        undefined_pairs: 0,
    };
    if k < 2 {
        out.value = Some(1.0);
        return out;
    }
    let mut best = f64::INFINITY;
    for c in 0..n_constituents {
        for i in 0..k {
            let vi = value(i, c);
            for j in (i + 1)..k {
                match (vi, value(j, c)) {
                    (Some(a), Some(b)) => {
                        out.defined_pairs += 1;
                        let r = ratio_of(a, b);
                        if r < best {
                            best = r;
                            out.worst = Some((i, j, c));
                        }
                    }
                    _ => out.undefined_pairs += 1,
                }
            }
        }
    }
    if out.defined_pairs > 0 {
        out.value = Some(best);
    }
    out
}

/// Min-pairwise value of a non-calibration definition from per-group counts.
#[inline]
pub fn pairwise_min_from_counts(def: FairnessDefinition, counts: &[ConfusionCounts]) -> PairwiseMin {
    let cons = def.constituents();
    min_pairwise(counts.len(), cons.len(), |g, c| counts[g].constituent(cons[c]))
}

/// Fairness measure of a non-calibration definition from per-group counts.
pub fn fairness_from_counts(
    def: FairnessDefinition,
    groups: &[String],
    counts: &[ConfusionCounts],
) -> Result<FairnessMeasure, MetricsError> {
    if def.is_calibration() {
        return Err(MetricsError::CalibrationNeedsMatrix);
    }
    if groups.len() != counts.len() {
        return Err(MetricsError::ThresholdCount {
            expected: groups.len(),
            found: counts.len(),
        });
    }
    let cons = def.constituents();
    let value = |g: usize, c: usize| counts[g].constituent(cons[c]);
    Ok(pairwise_min_from_counts(def, counts).into_measure(groups, cons, value))
}

/// Sorted scores of one group with prefix counts of adverse outcomes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupScores {
    scores: Vec<f64>,
    /// `adverse_prefix[i]` = adverse outcomes among the `i` lowest scores.
    adverse_prefix: Vec<usize>,
}

impl GroupScores {
    pub fn new(mut rows: Vec<(f64, bool)>) -> Self {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut adverse_prefix = Vec::with_capacity(rows.len() + 1);
        adverse_prefix.push(0);
        let mut acc = 0;
        for (_, o) in &rows {
            acc += *o as usize;
            adverse_prefix.push(acc);
        }
        GroupScores {
            scores: rows.into_iter().map(|r| r.0).collect(),
            adverse_prefix,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn adverse(&self) -> usize {
        *self.adverse_prefix.last().unwrap_or(&0)
    }

    /// Ascending scores.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Number of scores strictly below `x`.
    #[inline]
    pub fn below(&self, x: f64) -> usize {
        self.scores.partition_point(|&s| s < x)
    }

    #[inline]
    pub fn confusion(&self, threshold: f64) -> ConfusionCounts {
        let idx = self.below(threshold);
        let fn_ = self.adverse_prefix[idx];
        let tp = self.adverse() - fn_;
        ConfusionCounts {
            tp,
            fp: (self.len() - idx) - tp,
            tn: idx - fn_,
            fn_,
        }
    }

    /// `(units, adverse)` with score in `[lo, hi)`.
    #[inline]
    pub fn in_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let a = self.below(lo);
        let b = self.below(hi).max(a);
        (b - a, self.adverse_prefix[b] - self.adverse_prefix[a])
    }

    /// `(units, adverse)` assigned `label` by the cuts `[low, average, high]`.
    #[inline]
    pub fn in_tier(&self, cuts: [f64; 3], label: TierLabel) -> (usize, usize) {
        let (lo, hi) = match label {
            TierLabel::S1 => (f64::NEG_INFINITY, cuts[0]),
            TierLabel::S2 => (cuts[0], cuts[1]),
            TierLabel::S3 => (cuts[1], cuts[2]),
            TierLabel::S4 => (cuts[2], f64::INFINITY),
        };
        if lo == f64::NEG_INFINITY {
            let b = self.below(hi);
            return (b, self.adverse_prefix[b]);
        }
        if hi == f64::INFINITY {
            let a = self.below(lo);
            return (self.len() - a, self.adverse() - self.adverse_prefix[a]);
        }
        self.in_range(lo, hi)
    }

    /// Units whose tier differs between two cut triples.
    pub fn tier_changes(&self, from: [f64; 3], to: [f64; 3]) -> usize {
        let mut points = [from[0], from[1], from[2], to[0], to[1], to[2]];
        points.sort_by(f64::total_cmp);
        let mut changed = 0;
        let mut lo = f64::NEG_INFINITY;
        for hi in points.into_iter().chain(std::iter::once(f64::INFINITY)) {
            if hi > lo {
                // Both tier assignments are constant on [lo, hi).
                let probe = if lo == f64::NEG_INFINITY { hi } else { lo };
                let a = if lo == f64::NEG_INFINITY {
                    crate::tiers::tier_for(f64::NEG_INFINITY, from[0], from[1], from[2])
                } else {
                    crate::tiers::tier_for(probe, from[0], from[1], from[2])
                };
                let b = if lo == f64::NEG_INFINITY {
                    crate::tiers::tier_for(f64::NEG_INFINITY, to[0], to[1], to[2])
                } else {
                    crate::tiers::tier_for(probe, to[0], to[1], to[2])
                };
                if a != b {
                    let lo_idx = if lo == f64::NEG_INFINITY { 0 } else { self.below(lo) };
                    let hi_idx = if hi == f64::INFINITY { self.len() } else { self.below(hi) };
                    changed += hi_idx.saturating_sub(lo_idx);
                }
                lo = hi;
            }
        }
        changed
    }
}

/// One subsample, split by group, ready for repeated threshold queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleView {
    groups: Vec<String>,
    per_group: Vec<GroupScores>,
    total: usize,
}

impl SubsampleView {
    pub fn new(dataset: &Dataset, subsample: &Subsample) -> Self {
        let k = dataset.group_count();
        let mut rows: Vec<Vec<(f64, bool)>> = vec![Vec::new(); k];
        for &i in &subsample.indices {
            let r = &dataset.records()[i];
            rows[dataset.group_index(i)].push((r.score, r.outcome));
        }
        Self::from_group_rows(dataset.groups().to_vec(), rows)
    }

    /// Every record of the dataset, ignoring entity structure.
    pub fn whole(dataset: &Dataset) -> Self {
        let sub = Subsample {
            indices: (0..dataset.len()).collect(),
            seed_tag: 0,
        };
        Self::new(dataset, &sub)
    }

    /// `rows[g]` holds `(score, outcome)` for group `g`.
    pub fn from_group_rows(groups: Vec<String>, rows: Vec<Vec<(f64, bool)>>) -> Self {
        let per_group: Vec<GroupScores> = rows.into_iter().map(GroupScores::new).collect();
        let total = per_group.iter().map(|g| g.len()).sum();
        SubsampleView {
            groups,
            per_group,
            total,
        }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &GroupScores {
        &self.per_group[g]
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn group_position(&self, label: &str) -> Result<usize, MetricsError> {
        self.groups
            .iter()
            .position(|g| g == label)
            .ok_or_else(|| MetricsError::UnknownGroup(label.to_string()))
    }

    /// All scores, ascending.
    pub fn all_scores(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.per_group.iter().flat_map(|g| g.scores.iter().copied()).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn counts_at(&self, thresholds: &[f64]) -> Result<Vec<ConfusionCounts>, MetricsError> {
        self.check_len(thresholds)?;
        Ok(self.per_group.iter().zip(thresholds).map(|(g, &t)| g.confusion(t)).collect())
    }

    fn check_len(&self, thresholds: &[f64]) -> Result<(), MetricsError> {
        if thresholds.len() != self.groups.len() {
            return Err(MetricsError::ThresholdCount {
                expected: self.groups.len(),
                found: thresholds.len(),
            });
        }
        Ok(())
    }
}

pub fn confusion(view: &SubsampleView, group: &str, threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    let g = view.group_position(group)?;
    Ok(view.group(g).confusion(threshold))
}

/// Measure of a non-calibration definition with one cut per group.
pub fn fairness_measure(
    view: &SubsampleView,
    def: FairnessDefinition,
    thresholds: &[f64],
) -> Result<FairnessMeasure, MetricsError> {
    if def.is_calibration() {
        return Err(MetricsError::CalibrationNeedsMatrix);
    }
    let counts = view.counts_at(thresholds)?;
    fairness_from_counts(def, view.groups(), &counts)
}

/// Calibration at one tier label: the adverse rate among each group's units
/// in that tier, compared pairwise.
pub fn calibration_measure(
    view: &SubsampleView,
    matrix: &ThresholdMatrix,
    label: TierLabel,
) -> Result<FairnessMeasure, MetricsError> {
    let cuts = aligned_cuts(view, matrix)?;
    let rates: Vec<Vec<Option<f64>>> = (0..view.group_count())
        .map(|g| {
            let (n, adverse) = view.group(g).in_tier(cuts[g], label);
            vec![ratio(adverse, n)]
        })
        .collect();
    FairnessMeasure::from_values(view.groups(), FairnessDefinition::CAL.constituents(), &rates)
}

/// Per-group `[low, average, high]` cuts in the view's group order.
pub fn aligned_cuts(view: &SubsampleView, matrix: &ThresholdMatrix) -> Result<Vec<[f64; 3]>, MetricsError> {
    view.groups()
        .iter()
        .map(|g| {
            matrix
                .group_position(g)
                .map(|p| matrix.group_cuts(p))
                .ok_or_else(|| MetricsError::UnknownGroup(g.clone()))
        })
        .collect()
}

/// Calibration pairwise-min at a label from per-group cut triples.
#[inline]
pub fn calibration_min(view: &SubsampleView, cuts: &[[f64; 3]], label: TierLabel) -> PairwiseMin {
    min_pairwise(view.group_count(), 1, |g, _| {
        let (n, adverse) = view.group(g).in_tier(cuts[g], label);
        ratio(adverse, n)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Group(usize),
    Overall,
}

/// Performance vector for one group, or pooled over all groups with each
/// group at its own cut.
pub fn performance(view: &SubsampleView, thresholds: &[f64], scope: Scope) -> Result<PerformanceVector, MetricsError> {
    let counts = view.counts_at(thresholds)?;
    let c = match scope {
        Scope::Group(g) => *counts
            .get(g)
            .ok_or_else(|| MetricsError::UnknownGroup(format!("#{g}")))?,
        Scope::Overall => counts.into_iter().fold(ConfusionCounts::default(), |a, b| a + b),
    };
    if c.total() == 0 {
        return Err(MetricsError::EmptyScope);
    }
    Ok(c.performance())
}

/// Share of units whose side of the cut flips between the shared cut `phi`
/// and their group's cut.
pub fn delta_changed(view: &SubsampleView, phi: f64, thetas: &[f64]) -> Result<f64, MetricsError> {
    view.check_len(thetas)?;
    if view.is_empty() {
        return Ok(0.0);
    }
    let flips: usize = (0..view.group_count())
        .map(|g| flips_in_group(view.group(g), phi, thetas[g]))
        .sum();
    Ok(flips as f64 / view.len() as f64)
}

#[inline]
pub(crate) fn flips_in_group(g: &GroupScores, phi: f64, theta: f64) -> usize {
    g.below(phi).abs_diff(g.below(theta))
}

/// Share of units whose four-way tier differs between two matrices.
pub fn delta_changed_tiers(
    view: &SubsampleView,
    from: &ThresholdMatrix,
    to: &ThresholdMatrix,
) -> Result<f64, MetricsError> {
    if view.is_empty() {
        return Ok(0.0);
    }
    let a = aligned_cuts(view, from)?;
    let b = aligned_cuts(view, to)?;
    let changed: usize = (0..view.group_count())
        .map(|g| view.group(g).tier_changes(a[g], b[g]))
        .sum();
    Ok(changed as f64 / view.len() as f64)
}

/// Outcome of checking that balanced error rates force unequal PPV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpossibilityCheck {
    /// Prevalences equal, or some error rate on the boundary or undefined.
    NotApplicable,
    /// Error rates are not exactly balanced.
    NotBalanced,
    /// Balanced error rates and PPV unequal, as the identity requires.
    Holds,
    /// Balanced error rates with equal PPV.
    Violated,
}

/// With differing prevalences and interior error rates, error rate balance
/// equal to 1 must leave predictive parity below 1.
pub fn impossibility_check(counts: &[ConfusionCounts]) -> ImpossibilityCheck {
    let prevalences: Vec<Option<f64>> = counts.iter().map(|c| c.prevalence()).collect();
    let interior = |v: Option<f64>| matches!(v, Some(x) if x > 0.0 && x < 1.0);
    let all_interior = counts
        .iter()
        .all(|c| interior(c.constituent(Constituent::Fnr)) && interior(c.constituent(Constituent::Fpr)));
    let distinct_prev = prevalences.iter().any(|p| p.is_some() && *p != prevalences[0]);
    if counts.len() < 2 || !all_interior || prevalences.iter().any(Option::is_none) || !distinct_prev {
        return ImpossibilityCheck::NotApplicable;
    }
    let erb = pairwise_min_from_counts(FairnessDefinition::ERB, counts);
    if erb.value != Some(1.0) {
        return ImpossibilityCheck::NotBalanced;
    }
    let pp = pairwise_min_from_counts(FairnessDefinition::PP, counts);
    match pp.value {
        Some(v) if v < 1.0 => ImpossibilityCheck::Holds,
        _ => ImpossibilityCheck::Violated,
    }
}
