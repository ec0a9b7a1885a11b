//! Thresholds JSON and the CSV tables written by sweeps and audits.
//!
//! Floats are written with Rust's shortest round-trip formatting; an
//! undefined statistic is an empty field.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AuditReport, BestWeight, CorrectionConfig, CorrectionResult, SweepReport, WeightEvaluation};
use crate::error::ExportError;
use crate::metrics::FairnessDefinition;
use crate::tiers::{ConstraintViolation, ThresholdMatrix, Tier};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightThresholds {
    pub w: f64,
    pub post: ThresholdMatrix,
    pub violations: Vec<ConstraintViolation>,
}

/// Everything needed to apply or audit a correction, plus the config that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsFile {
    pub version: u32,
    pub definition: FairnessDefinition,
    pub seed: u64,
    pub config: CorrectionConfig,
    pub groups: Vec<String>,
    /// Input labels relabeled into another group before correction.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    pub pre: ThresholdMatrix,
    /// Empty for a single-weight correction.
    pub selected: Vec<BestWeight>,
    /// The matrix `apply` uses: each tier at its selected weight.
    pub applied: ThresholdMatrix,
    pub violations: Vec<ConstraintViolation>,
    pub per_w: Vec<WeightThresholds>,
    pub optimism_caveat: bool,
}

impl ThresholdsFile {
    pub fn from_sweep(report: &SweepReport, cfg: &CorrectionConfig) -> Self {
        let applied = report.selected();
        ThresholdsFile {
            version: FORMAT_VERSION,
            definition: report.definition,
            seed: report.seed,
            config: cfg.clone(),
            groups: report.groups.clone(),
            aliases: BTreeMap::new(),
            pre: report.pre.clone(),
            selected: report.best.clone(),
            violations: applied.violations(cfg.epsilon),
            applied,
            per_w: report
                .entries
                .iter()
                .map(|e| WeightThresholds {
                    w: e.correction.w,
                    post: e.correction.post.clone(),
                    violations: e.correction.violations.clone(),
                })
                .collect(),
            optimism_caveat: report.optimism_caveat,
        }
    }

    pub fn from_correction(result: &CorrectionResult, cfg: &CorrectionConfig) -> Self {
        ThresholdsFile {
            version: FORMAT_VERSION,
            definition: cfg.definition,
            seed: cfg.seed,
            config: cfg.clone(),
            groups: result.post.groups().to_vec(),
            aliases: BTreeMap::new(),
            pre: result.pre.clone(),
            selected: Vec::new(),
            applied: result.post.clone(),
            violations: result.violations.clone(),
            per_w: vec![WeightThresholds {
                w: result.w,
                post: result.post.clone(),
                violations: result.violations.clone(),
            }],
            optimism_caveat: true,
        }
    }

    /// Cuts for an input label, following aliases.
    pub fn resolve(&self, label: &str) -> Option<usize> {
        let label = self.aliases.get(label).map_or(label, String::as_str);
        self.applied.group_position(label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("thresholds serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ExportError> {
        let file: ThresholdsFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(ExportError::Version {
                found: file.version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(file)
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per weight, slot, group, measure and stage. Fairness rows use
/// group `all`; performance rows pooled over groups use `overall`.
pub fn write_evaluation_csv<W: Write>(out: W, evaluations: &[WeightEvaluation]) -> Result<(), ExportError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(["w", "slot", "group", "measure", "stage", "mean", "sd", "n_defined"])?;
    for e in evaluations {
        let w = e.w.to_string();
        for f in &e.fairness {
            for (stage, stat, measure) in [
                ("pre", &f.pre, e.definition.code()),
                ("post", &f.post, e.definition.code()),
                ("post", &f.changed, "changed"),
            ] {
                csv.write_record([
                    w.as_str(),
                    f.slot.code(),
                    "all",
                    measure,
                    stage,
                    &num(stat.mean),
                    &num(stat.sd),
                    &stat.n_defined.to_string(),
                ])?;
            }
        }
        for p in &e.performance {
            for (stage, stat) in [("pre", &p.pre), ("post", &p.post)] {
                csv.write_record([
                    w.as_str(),
                    p.tier.code(),
                    p.group.as_deref().unwrap_or("overall"),
                    p.measure.code(),
                    stage,
                    &num(stat.mean),
                    &num(stat.sd),
                    &stat.n_defined.to_string(),
                ])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

/// Threshold curves: one row per weight, tier, group and stage.
pub fn write_threshold_curve_csv<W: Write>(out: W, report: &SweepReport) -> Result<(), ExportError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(["w", "tier", "group", "stage", "threshold"])?;
    for e in &report.entries {
        let w = e.correction.w.to_string();
        for tier in Tier::ALL {
            for (g, group) in report.groups.iter().enumerate() {
                for (stage, m) in [("pre", &e.correction.pre), ("post", &e.correction.post)] {
                    csv.write_record([w.as_str(), tier.code(), group, stage, &m.get(tier, g).to_string()])?;
                }
            }
        }
    }
    csv.flush()?;
    Ok(())
}

/// Fairness against changed proportion: one row per weight and slot.
pub fn write_tradeoff_csv<W: Write>(out: W, report: &SweepReport) -> Result<(), ExportError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record([
        "w",
        "slot",
        "fairness_pre_mean",
        "fairness_post_mean",
        "fairness_post_sd",
        "changed_mean",
    ])?;
    for e in &report.entries {
        let w = e.correction.w.to_string();
        for f in &e.evaluation.fairness {
            csv.write_record([
                w.as_str(),
                f.slot.code(),
                &num(f.pre.mean),
                &num(f.post.mean),
                &num(f.post.sd),
                &num(f.changed.mean),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Selected weight per slot; slot `all` when one weight serves every label.
pub fn write_best_w_csv<W: Write>(out: W, best: &[BestWeight]) -> Result<(), ExportError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(["slot", "w", "pre_mean", "post_mean", "post_sd"])?;
    for b in best {
        csv.write_record([
            b.slot.map_or("all", |s| s.code()),
            &b.w.to_string(),
            &num(b.pre_mean),
            &b.post_mean.to_string(),
            &num(b.post_sd),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_audit_csv<W: Write>(out: W, report: &AuditReport) -> Result<(), ExportError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(["definition", "slot", "stage", "mean", "sd", "n_defined"])?;
    for r in &report.rows {
        csv.write_record([
            r.definition.code(),
            r.slot.code(),
            r.stage.code(),
            &num(r.stat.mean),
            &num(r.stat.sd),
            &r.stat.n_defined.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
