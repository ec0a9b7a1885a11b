//! Acceptance gate. Runs every criterion in sequence, so the timings are not
//! shared with other tests, and prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use tierfair::data::{generate_synthetic, SyntheticConfig};
use tierfair::metrics::{delta_changed, impossibility_check, ConfusionCounts, Constituent, ImpossibilityCheck, PerformanceMeasure};
use tierfair::optimizer::{agnostic_tiers, optimize_tier, tier_bounds, SearchOptions};
use tierfair::pipeline::{audit, run_correction, sweep, uniform_grid, CorrectionConfig, Slot, SweepReport};
use tierfair::{Dataset, FairnessDefinition, FairnessMeasure, SubsampleView, Tier, TierLabel};

/// Criteria that cannot hold as written; see the decisions ledger. They still
/// run and print their honest result.
const UNATTAINABLE: &[u32] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn sweep_config(def: FairnessDefinition) -> CorrectionConfig {
    CorrectionConfig {
        definition: def,
        subsamples: 50,
        evaluation_subsamples: 50,
        w_grid: uniform_grid(21),
        seed: 7,
        ..CorrectionConfig::default()
    }
}

fn welfare(total: usize) -> Dataset {
    generate_synthetic(&SyntheticConfig::welfare_like(total), 7).unwrap()
}

fn c1_worked_example() -> Outcome {
    let t = Instant::now();
    let groups: Vec<String> = ["BL", "HPA", "NV", "WH"].iter().map(|s| s.to_string()).collect();
    let fnr = [0.331, 0.368, 0.309, 0.386];
    let fpr = [0.342, 0.203, 0.310, 0.279];
    let values: Vec<Vec<Option<f64>>> = (0..4).map(|g| vec![Some(fnr[g]), Some(fpr[g])]).collect();
    let m = FairnessMeasure::from_values(&groups, FairnessDefinition::ERB.constituents(), &values).unwrap();
    let v = m.value.unwrap();
    let pair = m.worst_pair.clone().unwrap();
    let pair_ok = pair.first == "BL" && pair.second == "HPA" && pair.constituent == Constituent::Fpr;
    let exact = v == 0.203 / 0.342;
    // The printed rates are rounded to three places; the largest ratio they
    // admit is 0.2035 / 0.3415.
    let reachable = 0.2035 / 0.3415 >= 0.595;
    let two_dp = format!("{v:.2}");
    let fast = t.elapsed() < Duration::from_secs(1);
    assert!(pair_ok && exact && reachable && fast, "{v} {pair:?}");
    outcome(
        two_dp == "0.60",
        format!(
            "value {v:.4} = 0.203/0.342, worst pair (BL, HPA, FPR); rounds to {two_dp}, not 0.60. \
             rates that round to these inputs reach at most 0.5959, so 0.60 needs unrounded rates"
        ),
    )
}

fn c2_identity() -> Outcome {
    let d = welfare(5000);
    let cfg = CorrectionConfig { subsamples: 50, ..sweep_config(FairnessDefinition::ERB) };
    let t = Instant::now();
    let r = run_correction(&d, &cfg, 1.0).unwrap();
    let elapsed = t.elapsed();
    let whole = SubsampleView::whole(&d);
    let mut worst: f64 = 0.0;
    let mut changed: f64 = 0.0;
    for tier in Tier::ALL {
        for (a, b) in r.post.tier(tier).iter().zip(r.pre.tier(tier)) {
            worst = worst.max((a - b).abs());
        }
        changed = changed.max(delta_changed(&whole, r.pre.get(tier, 0), r.post.tier(tier)).unwrap());
    }
    let search_changed = r.search_changed.iter().flatten().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-9 && changed == 0.0 && search_changed == 0.0 && within(elapsed, 10),
        format!("max |post - pre| {worst:e}, delta {changed}, per-subsample delta {search_changed}, {elapsed:.1?}"),
    )
}

fn c3_oracle() -> Outcome {
    let t = Instant::now();
    let opts = SearchOptions::default();
    let mut instances = 0;
    let mut mismatches = std::collections::BTreeMap::<&str, usize>::new();
    for seed in 0..40u64 {
        let n1 = 6 + (seed as usize * 7) % 15;
        let n2 = 6 + (seed as usize * 11) % 15;
        let rows = common::random_rows(seed, &[n1, n2], 25);
        let view = SubsampleView::from_group_rows(vec!["a".into(), "b".into()], rows.clone());
        let Ok(anchors) = agnostic_tiers(&view) else { continue };
        for w in [0.0, 0.3, 0.7] {
            for tier in Tier::ALL {
                let lower = match tier {
                    Tier::Low => None,
                    Tier::Average => Some(vec![anchors.low; 2]),
                    Tier::High => Some(vec![anchors.average; 2]),
                };
                let bounds = tier_bounds(&view, tier, &anchors, lower.as_deref(), opts.epsilon).unwrap();
                for def in FairnessDefinition::AT_CUT {
                    let got = optimize_tier(&view, def, w, tier, &anchors, lower.as_deref(), &opts).unwrap();
                    let want = common::exhaustive_tier(def, &rows, w, anchors.get(tier), &bounds);
                    let total = got.objective.total;
                    let same = total == want || (total - want).abs() <= 1e-12;
                    if def == FairnessDefinition::ERB {
                        instances += 1;
                    }
                    if !same {
                        *mismatches.entry(def.code()).or_default() += 1;
                    }
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let erb = mismatches.get("ERB").copied().unwrap_or(0);
    outcome(
        instances >= 100 && erb == 0 && within(elapsed, 60),
        format!("ERB {erb} mismatches in {instances} instances; other definitions {mismatches:?}; {elapsed:.1?}"),
    )
}

/// Improvement of every slot at its selected weight.
fn improvements(report: &SweepReport) -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    for b in &report.best {
        let entry = report.entry(b.w).unwrap();
        let slots = match b.slot {
            Some(slot) => vec![slot],
            None => TierLabel::ALL.iter().map(|&l| Slot::Label(l)).collect(),
        };
        for slot in slots {
            let f = entry.evaluation.fairness_at(slot).unwrap();
            out.push((
                format!("{}@{}", slot.code(), b.w),
                f.pre.mean.unwrap_or(f64::NAN),
                f.post.mean.unwrap_or(f64::NAN),
            ));
        }
    }
    out
}

fn show(rows: &[(String, f64, f64)]) -> String {
    rows.iter().map(|(s, a, b)| format!("{s} {a:.3}->{b:.3}")).collect::<Vec<_>>().join(", ")
}

fn c4_erb(report: &SweepReport, elapsed: Duration) -> Outcome {
    let rows = improvements(report);
    let pass = rows.len() == 3 && rows.iter().all(|(_, pre, post)| post - pre >= 0.05);
    outcome(pass && within(elapsed, 15 * 60), format!("{}; {elapsed:.0?}", show(&rows)))
}

fn c5_cost(report: &SweepReport) -> Outcome {
    let measures = [
        PerformanceMeasure::Acc,
        PerformanceMeasure::Fnr,
        PerformanceMeasure::Fpr,
        PerformanceMeasure::Npv,
        PerformanceMeasure::Ppv,
    ];
    let mut worst = (0.0, String::new());
    for b in &report.best {
        let Some(Slot::Tier(tier)) = b.slot else { continue };
        let e = &report.entry(b.w).unwrap().evaluation;
        for m in measures {
            let p = e.performance_at(tier, None, m).unwrap();
            let shift = (p.post.mean.unwrap() - p.pre.mean.unwrap()).abs();
            if shift >= worst.0 {
                worst = (shift, format!("{} {} at w {}", tier.code(), m.code(), b.w));
            }
        }
    }
    outcome(worst.0 <= 0.03, format!("largest overall shift {:.2}pp ({})", 100.0 * worst.0, worst.1))
}

fn c6_impossibility(d: &Dataset, report: &SweepReport) -> Outcome {
    let cfg = sweep_config(FairnessDefinition::ERB);
    let a = audit(d, &report.pre, Some(&report.selected()), &cfg).unwrap();
    let subsample_violations = a.flags.impossibility_violations();
    let applicable: usize = a.flags.impossibility.iter().flatten().map(|t| t.holds + t.not_balanced).sum();
    // Every two-group table up to eight units per cell: balanced error rates
    // with differing prevalence must leave PPV unequal.
    let (mut balanced, mut violated) = (0, 0);
    let cells = 1..=8usize;
    let tables: Vec<ConfusionCounts> = cells
        .clone()
        .flat_map(|tp| {
            cells.clone().flat_map(move |fn_| {
                (1..=8usize).flat_map(move |fp| (1..=8usize).map(move |tn| ConfusionCounts { tp, fp, tn, fn_ }))
            })
        })
        .collect();
    for x in &tables {
        for y in &tables {
            match impossibility_check(&[*x, *y]) {
                ImpossibilityCheck::Holds => balanced += 1,
                ImpossibilityCheck::Violated => {
                    balanced += 1;
                    violated += 1;
                }
                _ => {}
            }
        }
    }
    outcome(
        subsample_violations == 0 && violated == 0 && balanced > 0,
        format!(
            "{subsample_violations} violations over {applicable} applicable subsample checks; \
             {violated} of {balanced} balanced enumerated tables"
        ),
    )
}

fn c7_other_definitions(d: &Dataset) -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    for def in [FairnessDefinition::CUAE, FairnessDefinition::TE, FairnessDefinition::CAL] {
        let started = Instant::now();
        let report = sweep(d, &sweep_config(def)).unwrap();
        let rows = improvements(&report);
        pass &= rows.len() == if def.is_calibration() { 4 } else { 3 };
        pass &= rows.iter().all(|(_, pre, post)| post > pre);
        details.push(format!("{}: {} ({:.0?})", def.code(), show(&rows), started.elapsed()));
    }
    let elapsed = t.elapsed();
    outcome(pass && within(elapsed, 30 * 60), format!("{}; total {elapsed:.0?}", details.join("; ")))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tierfair"))
}

fn run_cli(args: &[&str]) {
    let o = bin().args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let root = dir.path();
    let mut differing = Vec::new();
    let mut compared = 0;
    for def in ["ERB", "CAL"] {
        let cfg = root.join(format!("{def}.json"));
        std::fs::write(
            &cfg,
            r#"{"correction": {"subsamples": 8, "evaluation_subsamples": 8, "w_grid": [0, 0.25, 0.5, 0.75, 1]}, "synth_rows": 2000}"#,
        )
        .unwrap();
        let data_dir = root.join(format!("{def}-data"));
        let cfg = cfg.to_str().unwrap();
        run_cli(&["--config", cfg, "--seed", "3", "--out-dir", data_dir.to_str().unwrap(), "synth"]);
        let data = data_dir.join("synthetic.csv");
        let outs: Vec<PathBuf> = ["a", "b"]
            .iter()
            .map(|run| {
                let out = root.join(format!("{def}-{run}"));
                run_cli(&[
                    "--config", cfg, "--seed", "3", "--definition", def, "--out-dir", out.to_str().unwrap(),
                    "sweep", "--data", data.to_str().unwrap(),
                ]);
                out
            })
            .collect();
        for f in ["thresholds.json", "evaluation.csv", "threshold_curve.csv", "tradeoff.csv", "best_w.csv", "manifest.json"] {
            compared += 1;
            if std::fs::read(outs[0].join(f)).unwrap() != std::fs::read(outs[1].join(f)).unwrap() {
                differing.push(format!("{def}/{f}"));
            }
        }
    }
    outcome(differing.is_empty(), format!("{compared} files compared, differing: {differing:?}"))
}

fn c9_adult() -> Outcome {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/adult_scored.csv");
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("adult.json");
    std::fs::write(
        &cfg,
        r#"{"correction": {"definition": "ERB", "subsamples": 50, "evaluation_subsamples": 50, "w_grid": [0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1]}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let t = Instant::now();
    run_cli(&[
        "--config", cfg.to_str().unwrap(), "--seed", "7", "--out-dir", out.to_str().unwrap(),
        "sweep", "--data", data.to_str().unwrap(),
    ]);
    let elapsed = t.elapsed();
    let mut rdr = csv::Reader::from_path(out.join("best_w.csv")).unwrap();
    let rows: Vec<(String, f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            let num = |i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
            (format!("{}@{}", &r[0], &r[1]), num(2), num(3))
        })
        .collect();
    let pass = rows.len() == 3 && rows.iter().all(|(_, pre, post)| post > pre);
    outcome(pass && within(elapsed, 10 * 60), format!("ERB by race: {}; {elapsed:.0?}", show(&rows)))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    record(1, guarded(c1_worked_example));
    record(2, guarded(c2_identity));
    record(3, guarded(c3_oracle));

    let d = welfare(10_000);
    let t = Instant::now();
    let erb = catch_unwind(|| sweep(&d, &sweep_config(FairnessDefinition::ERB)).unwrap());
    let elapsed = t.elapsed();
    match &erb {
        Ok(report) => {
            record(4, guarded(|| c4_erb(report, elapsed)));
            record(5, guarded(|| c5_cost(report)));
            record(6, guarded(|| c6_impossibility(&d, report)));
        }
        Err(_) => {
            for n in 4..=6 {
                record(n, outcome(false, "ERB sweep panicked"));
            }
        }
    }
    record(7, guarded(|| c7_other_definitions(&d)));
    record(8, guarded(c8_determinism));
    record(9, guarded(c9_adult));

    let failed: Vec<u32> = results
        .iter()
        .filter(|(n, o)| !o.pass && !UNATTAINABLE.contains(n))
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
