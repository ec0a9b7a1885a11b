//! Tier labels, tier thresholds and the per-group threshold matrix.
//!
//! Three cut points (low, average, high) split the score axis into four
//! ordinal tiers `S1 < S2 < S3 < S4`. Every interval is left-closed: a score
//! sitting exactly on a cut belongs to the higher tier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TierError;

/// One of the three cut points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "L")]
    Low,
    #[serde(rename = "A")]
    Average,
    #[serde(rename = "H")]
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Low, Tier::Average, Tier::High];

    pub fn index(self) -> usize {
        match self {
            Tier::Low => 0,
            Tier::Average => 1,
            Tier::High => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Tier::Low => "L",
            Tier::Average => "A",
            Tier::High => "H",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Tier {
    type Err = TierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" | "low" => Ok(Tier::Low),
            "A" | "average" => Ok(Tier::Average),
            "H" | "high" => Ok(Tier::High),
            other => Err(TierError::UnknownTier(other.to_string())),
        }
    }
}

/// Ordinal risk tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TierLabel {
    S1,
    S2,
    S3,
    S4,
}

impl TierLabel {
    pub const ALL: [TierLabel; 4] = [TierLabel::S1, TierLabel::S2, TierLabel::S3, TierLabel::S4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            TierLabel::S1 => "S1",
            TierLabel::S2 => "S2",
            TierLabel::S3 => "S3",
            TierLabel::S4 => "S4",
        }
    }
}

impl fmt::Display for TierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Tier for a score given the three cuts of its group.
#[inline]
pub fn tier_for(score: f64, low: f64, average: f64, high: f64) -> TierLabel {
    if score >= high {
        TierLabel::S4
    } else if score >= average {
        TierLabel::S3
    } else if score >= low {
        TierLabel::S2
    } else {
        TierLabel::S1
    }
}

/// Group-agnostic cut points shared by every group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgnosticTiers {
    pub low: f64,
    pub average: f64,
    pub high: f64,
}

impl AgnosticTiers {
    pub fn new(low: f64, average: f64, high: f64) -> Result<Self, TierError> {
        let t = AgnosticTiers { low, average, high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TierError> {
        let ok = self.low.is_finite()
            && self.average.is_finite()
            && self.high.is_finite()
            && self.low < self.average
            && self.average < self.high;
        if ok {
            Ok(())
        } else {
            Err(TierError::UnorderedAnchors {
                low: self.low,
                average: self.average,
                high: self.high,
            })
        }
    }

    pub fn get(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Low => self.low,
            Tier::Average => self.average,
            Tier::High => self.high,
        }
    }

    pub fn set(&mut self, tier: Tier, value: f64) {
        match tier {
            Tier::Low => self.low = value,
            Tier::Average => self.average = value,
            Tier::High => self.high = value,
        }
    }

    /// Component-wise arithmetic mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a AgnosticTiers>) -> Option<AgnosticTiers> {
        let mut n = 0usize;
        let mut acc = [0.0; 3];
        for t in items {
            acc[0] += t.low;
            acc[1] += t.average;
            acc[2] += t.high;
            n += 1;
        }
        (n > 0).then(|| AgnosticTiers {
            low: acc[0] / n as f64,
            average: acc[1] / n as f64,
            high: acc[2] / n as f64,
        })
    }
}

/// A constraint the matrix fails to satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintViolation {
    /// Within one group the cuts are not strictly increasing.
    Orderliness { group: String },
    /// The agnostic cut lies outside `[min, max]` of the group cuts.
    Coveredness { tier: Tier, min: f64, max: f64, anchor: f64 },
}

/// Per-tier, per-group cut points, anchored to the agnostic cuts they were
/// derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct ThresholdMatrix {
    groups: Vec<String>,
    cuts: [Vec<f64>; 3],
    anchors: AgnosticTiers,
}

#[derive(Deserialize)]
struct MatrixRepr {
    groups: Vec<String>,
    cuts: [Vec<f64>; 3],
    anchors: AgnosticTiers,
}

impl TryFrom<MatrixRepr> for ThresholdMatrix {
    type Error = TierError;

    fn try_from(r: MatrixRepr) -> Result<Self, TierError> {
        let [low, average, high] = r.cuts;
        ThresholdMatrix::new(r.groups, low, average, high, r.anchors)
    }
}

impl ThresholdMatrix {
    pub fn new(
        groups: Vec<String>,
        low: Vec<f64>,
        average: Vec<f64>,
        high: Vec<f64>,
        anchors: AgnosticTiers,
    ) -> Result<Self, TierError> {
        let k = groups.len();
        for (tier, v) in Tier::ALL.iter().zip([&low, &average, &high]) {
            if v.len() != k {
                return Err(TierError::ShapeMismatch {
                    tier: *tier,
                    expected: k,
                    found: v.len(),
                });
            }
        }
        Ok(ThresholdMatrix {
            groups,
            cuts: [low, average, high],
            anchors,
        })
    }

    /// Every group uses the agnostic cuts.
    pub fn replicated(groups: Vec<String>, anchors: AgnosticTiers) -> Self {
        let k = groups.len();
        ThresholdMatrix {
            groups,
            cuts: [
                vec![anchors.low; k],
                vec![anchors.average; k],
                vec![anchors.high; k],
            ],
            anchors,
        }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn anchors(&self) -> AgnosticTiers {
        self.anchors
    }

    pub fn tier(&self, tier: Tier) -> &[f64] {
        &self.cuts[tier.index()]
    }

    pub fn set_tier(&mut self, tier: Tier, values: Vec<f64>) -> Result<(), TierError> {
        if values.len() != self.groups.len() {
            return Err(TierError::ShapeMismatch {
                tier,
                expected: self.groups.len(),
                found: values.len(),
            });
        }
        self.cuts[tier.index()] = values;
        Ok(())
    }

    pub fn get(&self, tier: Tier, group: usize) -> f64 {
        self.cuts[tier.index()][group]
    }

    pub fn group_position(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    /// The three cuts of one group, in tier order.
    pub fn group_cuts(&self, group: usize) -> [f64; 3] {
        [self.cuts[0][group], self.cuts[1][group], self.cuts[2][group]]
    }

    #[inline]
    pub fn tier_of(&self, score: f64, group: usize) -> TierLabel {
        tier_for(score, self.cuts[0][group], self.cuts[1][group], self.cuts[2][group])
    }

    /// Tier for a score in the named group.
    pub fn assign_tier(&self, score: f64, group: &str) -> Result<TierLabel, TierError> {
        let g = self
            .group_position(group)
            .ok_or_else(|| TierError::UnknownGroup(group.to_string()))?;
        Ok(self.tier_of(score, g))
    }

    /// Reorders the matrix to the given vocabulary. Fails naming the first
    /// group the matrix does not cover.
    pub fn aligned_to(&self, groups: &[String]) -> Result<ThresholdMatrix, TierError> {
        let mut cuts: [Vec<f64>; 3] = Default::default();
        for g in groups {
            let pos = self
                .group_position(g)
                .ok_or_else(|| TierError::UnknownGroup(g.clone()))?;
            for (t, c) in cuts.iter_mut().enumerate() {
                c.push(self.cuts[t][pos]);
            }
        }
        Ok(ThresholdMatrix {
            groups: groups.to_vec(),
            cuts,
            anchors: self.anchors,
        })
    }

    /// Orderliness (strict within each group) and coveredness (anchor within
    /// the closed group range, widened by `tolerance`).
    pub fn violations(&self, tolerance: f64) -> Vec<ConstraintViolation> {
        let mut out = Vec::new();
        for (g, label) in self.groups.iter().enumerate() {
            let [l, a, h] = self.group_cuts(g);
            if !(l < a && a < h) {
                out.push(ConstraintViolation::Orderliness {
                    group: label.clone(),
                });
            }
        }
        if self.groups.is_empty() {
            return out;
        }
        for tier in Tier::ALL {
            let v = self.tier(tier);
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let anchor = self.anchors.get(tier);
            if anchor < min - tolerance || anchor > max + tolerance {
                out.push(ConstraintViolation::Coveredness {
                    tier,
                    min,
                    max,
                    anchor,
                });
            }
        }
        out
    }

    /// Component-wise mean of matrices sharing one vocabulary.
    pub fn mean(items: &[ThresholdMatrix]) -> Option<ThresholdMatrix> {
        let first = items.first()?;
        let k = first.groups.len();
        let n = items.len() as f64;
        let mut cuts: [Vec<f64>; 3] = [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
        for m in items {
            debug_assert_eq!(m.groups, first.groups);
            for t in 0..3 {
                for g in 0..k {
                    cuts[t][g] += m.cuts[t][g];
                }
            }
        }
        for c in cuts.iter_mut() {
            for v in c.iter_mut() {
                *v /= n;
            }
        }
        let anchors = AgnosticTiers::mean(items.iter().map(|m| &m.anchors))?;
        Some(ThresholdMatrix {
            groups: first.groups.clone(),
            cuts,
            anchors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2_wh() -> ThresholdMatrix {
        // Published post-correction cuts for one group, with the published
        // pre-correction cuts as anchors.
        ThresholdMatrix::new(
            vec!["WH".into()],
            vec![0.0408],
            vec![0.1243],
            vec![0.3521],
            AgnosticTiers::new(0.0420, 0.1275, 0.3494).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn boundary_goes_to_higher_tier() {
        let m = table2_wh();
        assert_eq!(m.assign_tier(0.1243, "WH").unwrap(), TierLabel::S3);
        assert_eq!(m.assign_tier(0.0408, "WH").unwrap(), TierLabel::S2);
        assert_eq!(m.assign_tier(0.3521, "WH").unwrap(), TierLabel::S4);
    }

    #[test]
    fn published_wh_cuts_place_point_two_in_s3() {
        assert_eq!(table2_wh().assign_tier(0.2, "WH").unwrap(), TierLabel::S3);
    }

    #[test]
    fn extremes() {
        let m = table2_wh();
        assert_eq!(m.assign_tier(0.0, "WH").unwrap(), TierLabel::S1);
        assert_eq!(m.assign_tier(1.0, "WH").unwrap(), TierLabel::S4);
    }

    #[test]
    fn unknown_group_is_lookup_error() {
        assert!(matches!(
            table2_wh().assign_tier(0.5, "BL"),
            Err(TierError::UnknownGroup(g)) if g == "BL"
        ));
    }

    #[test]
    fn replicated_matrix_has_no_violations() {
        let a = AgnosticTiers::new(0.1, 0.2, 0.4).unwrap();
        let m = ThresholdMatrix::replicated(vec!["a".into(), "b".into()], a);
        assert!(m.violations(0.0).is_empty());
    }

    #[test]
    fn coveredness_violation_is_reported() {
        let a = AgnosticTiers::new(0.1, 0.2, 0.4).unwrap();
        let m = ThresholdMatrix::new(
            vec!["a".into(), "b".into()],
            vec![0.12, 0.15],
            vec![0.2, 0.2],
            vec![0.4, 0.4],
            a,
        )
        .unwrap();
        let v = m.violations(0.0);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], ConstraintViolation::Coveredness { tier: Tier::Low, .. }));
    }

    #[test]
    fn unordered_anchors_rejected() {
        assert!(AgnosticTiers::new(0.3, 0.2, 0.4).is_err());
    }
}
