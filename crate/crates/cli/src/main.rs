//! `tierfair` command-line runner.
//!
//! Exit codes: 0 when every artifact was written, 2 for invalid input or
//! configuration, 1 for anything else.

mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tierfair::data::{generate_synthetic, merge_small_groups, read_dataset, write_dataset, write_merge_log};
use tierfair::error::{DataError, ExportError, PipelineError, TierError};
use tierfair::optimizer::agnostic_tiers;
use tierfair::pipeline::export::{
    write_audit_csv, write_best_w_csv, write_evaluation_csv, write_threshold_curve_csv, write_tradeoff_csv,
    ThresholdsFile,
};
use tierfair::pipeline::{audit, evaluate, run_correction, sweep};
use tierfair::{Dataset, FairnessDefinition, SubsampleView, ThresholdMatrix};

use config::RunConfig;
use manifest::{sha256_hex, FileDigest, Outputs, RunManifest};

#[derive(Parser)]
#[command(version, about = "Group-specific risk-tier thresholds under a fairness definition")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to every available core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured fairness definition.
    #[arg(long, global = true)]
    definition: Option<FairnessDefinition>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scored dataset.
    Synth {
        #[arg(long, default_value = "synthetic.csv")]
        output: String,
    },
    /// Measure all nine definitions at shared or corrected thresholds.
    Audit {
        #[arg(long)]
        data: PathBuf,
        /// A thresholds file, or `agnostic` for the dataset's shared cuts.
        #[arg(long, default_value = "agnostic")]
        thresholds: String,
    },
    /// Correct at a single penalty weight.
    Correct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        w: f64,
    },
    /// Correct and evaluate across the configured weight grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
    },
    /// Append a tier column using a thresholds file.
    Apply {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long, default_value = "scored.csv")]
        output: String,
    },
}

/// Input the user can fix.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<Invalid>() || e.is::<TierError>() || e.is::<serde_json::Error>() {
            return true;
        }
        if let Some(d) = e.downcast_ref::<DataError>() {
            return !matches!(d, DataError::Io(_));
        }
        if let Some(x) = e.downcast_ref::<ExportError>() {
            return matches!(x, ExportError::Json(_) | ExportError::Version { .. });
        }
        if let Some(p) = e.downcast_ref::<PipelineError>() {
            return matches!(
                p,
                PipelineError::Config { .. }
                    | PipelineError::GuardViolation { .. }
                    | PipelineError::EmptyDataset
                    | PipelineError::Data(_)
                    | PipelineError::Tier(_)
            );
        }
        false
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_validation(&err) { 2 } else { 1 })
        }
    }
}

struct Run {
    cfg: RunConfig,
    inputs: Vec<FileDigest>,
    out: Outputs,
    command: &'static str,
}

impl Run {
    fn read_input(&mut self, path: &Path) -> anyhow::Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Loads a dataset and applies the configured group merge.
    fn dataset(&mut self, path: &Path) -> anyhow::Result<(Dataset, Vec<tierfair::data::MergeEvent>)> {
        let bytes = self.read_input(path)?;
        let d = read_dataset(&bytes[..], &self.cfg.columns).with_context(|| format!("loading {}", path.display()))?;
        if self.cfg.merge_min_size == 0 {
            return Ok((d, Vec::new()));
        }
        let (merged, events) = merge_small_groups(&d, self.cfg.merge_min_size)?;
        if !events.is_empty() {
            let mut log = Vec::new();
            write_merge_log(&events, &mut log)?;
            self.out.write("merge_log.jsonl", &log)?;
        }
        Ok((merged, events))
    }

    fn thresholds(&mut self, path: &Path) -> anyhow::Result<ThresholdsFile> {
        let bytes = self.read_input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Invalid(format!("{} is not UTF-8", path.display())))?;
        ThresholdsFile::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }

    fn finish(self) -> anyhow::Result<()> {
        let seed = self.cfg.correction.seed;
        self.out.finish(RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: self.cfg,
            inputs: self.inputs,
            outputs: Vec::new(),
        })
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), ExportError>) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Invalid("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (mut cfg, config_bytes) = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.correction.seed = seed;
    }
    if let Some(def) = cli.definition {
        cfg.correction.definition = def;
    }
    cfg.correction.validate()?;
    let mut inputs = Vec::new();
    if let (Some(path), Some(bytes)) = (&cli.config, &config_bytes) {
        inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }
    let command = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::Audit { .. } => "audit",
        Command::Correct { .. } => "correct",
        Command::Sweep { .. } => "sweep",
        Command::Apply { .. } => "apply",
    };
    let mut run = Run {
        cfg,
        inputs,
        out: Outputs::new(&cli.out_dir)?,
        command,
    };
    match cli.command {
        Command::Synth { output } => cmd_synth(&mut run, &output, cli.seed)?,
        Command::Audit { data, thresholds } => cmd_audit(&mut run, &data, &thresholds)?,
        Command::Correct { data, w } => cmd_correct(&mut run, &data, w)?,
        Command::Sweep { data } => cmd_sweep(&mut run, &data)?,
        Command::Apply {
            data,
            thresholds,
            output,
        } => cmd_apply(&mut run, &data, &thresholds, &output)?,
    }
    run.finish()
}

fn cmd_synth(run: &mut Run, output: &str, seed: Option<u64>) -> anyhow::Result<()> {
    let synth = run.cfg.synthetic();
    let seed = seed.or(synth.seed).unwrap_or(run.cfg.correction.seed);
    let d = generate_synthetic(&synth, seed)?;
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf)?;
    run.out.write(output, &buf)?;
    println!("wrote {} records in {} groups", d.len(), d.group_count());
    Ok(())
}

fn cmd_audit(run: &mut Run, data: &Path, thresholds: &str) -> anyhow::Result<()> {
    let (d, _) = run.dataset(data)?;
    let (pre, post) = if thresholds == "agnostic" {
        let anchors = agnostic_tiers(&SubsampleView::whole(&d)).context("shared cuts of the dataset")?;
        (ThresholdMatrix::replicated(d.groups().to_vec(), anchors), None)
    } else {
        let file = run.thresholds(Path::new(thresholds))?;
        let pre = file.pre.aligned_to(d.groups()).context("pre thresholds")?;
        let post = file.applied.aligned_to(d.groups()).context("post thresholds")?;
        (pre, Some(post))
    };
    let report = audit(&d, &pre, post.as_ref(), &run.cfg.correction)?;
    run.out.write("audit.csv", &csv_bytes(|b| write_audit_csv(b, &report))?)?;
    let mut flags = serde_json::to_string_pretty(&report.flags)?;
    flags.push('\n');
    run.out.write("audit_flags.json", flags.as_bytes())?;
    println!(
        "audited {} definitions on {} subsamples",
        FairnessDefinition::ALL.len(),
        report.subsamples
    );
    Ok(())
}

fn aliases(events: &[tierfair::data::MergeEvent]) -> std::collections::BTreeMap<String, String> {
    events.iter().map(|e| (e.source.clone(), e.target.clone())).collect()
}

fn cmd_correct(run: &mut Run, data: &Path, w: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Invalid(format!("--w {w} is outside [0, 1]")).into());
    }
    let (d, merges) = run.dataset(data)?;
    let cfg = &run.cfg.correction;
    let result = run_correction(&d, cfg, w)?;
    let evaluation = evaluate(&d, cfg, w, &result.pre, &result.post)?;
    let mut file = ThresholdsFile::from_correction(&result, cfg);
    file.aliases = aliases(&merges);
    run.out.write("thresholds.json", file.to_json().as_bytes())?;
    run.out.write("evaluation.csv", &csv_bytes(|b| write_evaluation_csv(b, &[evaluation]))?)?;
    for v in &result.violations {
        eprintln!("warning: bagged thresholds at w = {w} violate {v:?}");
    }
    Ok(())
}

fn cmd_sweep(run: &mut Run, data: &Path) -> anyhow::Result<()> {
    let (d, merges) = run.dataset(data)?;
    let cfg = &run.cfg.correction;
    let report = sweep(&d, cfg)?;
    for f in &report.failures {
        eprintln!("warning: w = {} failed: {}", f.w, f.message);
    }
    let mut file = ThresholdsFile::from_sweep(&report, cfg);
    file.aliases = aliases(&merges);
    let evaluations: Vec<_> = report.entries.iter().map(|e| e.evaluation.clone()).collect();
    run.out.write("thresholds.json", file.to_json().as_bytes())?;
    run.out.write("evaluation.csv", &csv_bytes(|b| write_evaluation_csv(b, &evaluations))?)?;
    run.out.write("threshold_curve.csv", &csv_bytes(|b| write_threshold_curve_csv(b, &report))?)?;
    run.out.write("tradeoff.csv", &csv_bytes(|b| write_tradeoff_csv(b, &report))?)?;
    run.out.write("best_w.csv", &csv_bytes(|b| write_best_w_csv(b, &report.best))?)?;
    let mut summary = serde_json::to_string_pretty(&serde_json::json!({
        "failures": report.failures,
        "monotonicity": report.monotonicity,
        "optimism_caveat": report.optimism_caveat,
    }))?;
    summary.push('\n');
    run.out.write("sweep_summary.json", summary.as_bytes())?;
    for b in &report.best {
        let slot = b.slot.map_or("all", |s| s.code());
        println!("best w for {slot}: {} (post mean {})", b.w, b.post_mean);
    }
    Ok(())
}

fn cmd_apply(run: &mut Run, data: &Path, thresholds: &Path, output: &str) -> anyhow::Result<()> {
    let file = run.thresholds(thresholds)?;
    let bytes = run.read_input(data)?;
    let columns = run.cfg.columns.clone();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(&bytes[..]);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (cg, cs) = (find(&columns.group)?, find(&columns.score)?);
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = headers.clone();
    header.push_field("tier");
    out.write_record(&header)?;
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let mut row = row.map_err(|e| Invalid(format!("row {row_no}: {e}")))?;
        let group = row.get(cg).unwrap_or("").trim();
        let raw = row.get(cs).unwrap_or("").trim();
        let score: f64 = raw
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| Invalid(format!("row {row_no}: score `{raw}` is not a number")))?;
        let g = file
            .resolve(group)
            .ok_or_else(|| Invalid(format!("row {row_no}: group `{group}` is not in the thresholds file")))?;
        let tier = file.applied.tier_of(score, g);
        row.push_field(tier.code());
        out.write_record(&row)?;
    }
    let buf = out.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    run.out.write(output, &buf)?;
    Ok(())
}
