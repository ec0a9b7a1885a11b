//! Dataset model, CSV ingestion, synthetic generation, small-group merging
//! and one-record-per-entity subsampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One scored unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub entity_id: String,
    /// `true` when the adverse event occurred.
    pub outcome: bool,
    pub group: String,
    /// Predicted probability of the adverse event.
    pub score: f64,
}

/// Immutable collection of records plus its group vocabulary.
///
/// The vocabulary is kept in sorted order. Records keep their input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    groups: Vec<String>,
    group_of: Vec<usize>,
    entities: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset whose vocabulary is the distinct group labels.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self, DataError> {
        let groups: Vec<String> = records
            .iter()
            .map(|r| r.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_vocabulary(records, groups)
    }

    /// Builds a dataset against a declared vocabulary. Every declared group
    /// must occur at least once.
    pub fn with_vocabulary(records: Vec<SampleRecord>, groups: Vec<String>) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyInput);
        }
        let index: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let mut group_of = Vec::with_capacity(records.len());
        let mut seen = vec![false; groups.len()];
        for (i, r) in records.iter().enumerate() {
            if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
                return Err(DataError::InvalidRow {
                    row: i + 1,
                    message: format!("score {} outside [0, 1]", r.score),
                });
            }
            let g = *index
                .get(r.group.as_str())
                .ok_or_else(|| DataError::UnknownGroup(r.group.clone()))?;
            seen[g] = true;
            group_of.push(g);
        }
        if let Some(g) = seen.iter().position(|s| !s) {
            return Err(DataError::EmptyGroup(groups[g].clone()));
        }
        let mut by_entity: HashMap<&str, usize> = HashMap::new();
        let mut entities: Vec<Vec<usize>> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            let slot = *by_entity.entry(r.entity_id.as_str()).or_insert_with(|| {
                entities.push(Vec::new());
                entities.len() - 1
            });
            entities[slot].push(i);
        }
        Ok(Dataset {
            records,
            groups,
            group_of,
            entities,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Vocabulary position of record `i`'s group.
    pub fn group_index(&self, i: usize) -> usize {
        self.group_of[i]
    }

    pub fn group_position(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Record positions per distinct entity, in first-appearance order.
    pub fn entities(&self) -> &[Vec<usize>] {
        &self.entities
    }

    /// Per-group `(records, adverse outcomes)`.
    pub fn group_tallies(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.groups.len()];
        for (r, &g) in self.records.iter().zip(&self.group_of) {
            out[g].0 += 1;
            out[g].1 += r.outcome as usize;
        }
        out
    }
}

/// Names of the four input columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub entity_id: String,
    pub outcome: String,
    pub group: String,
    pub score: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            entity_id: "entity_id".into(),
            outcome: "outcome".into(),
            group: "group".into(),
            score: "score".into(),
        }
    }
}

fn parse_outcome(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

pub fn load_dataset(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, columns)
}

/// Reads CSV with a header row. Row numbers in errors count data rows from 1.
pub fn read_dataset<R: Read>(reader: R, columns: &ColumnMap) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ci = find(&columns.entity_id)?;
    let co = find(&columns.outcome)?;
    let cg = find(&columns.group)?;
    let cs = find(&columns.score)?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::InvalidRow {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let outcome = parse_outcome(field(co)).ok_or_else(|| DataError::InvalidRow {
            row: row_no,
            message: format!("outcome `{}` is not one of true/false/1/0", field(co)),
        })?;
        let score: f64 = field(cs).parse().map_err(|_| DataError::InvalidRow {
            row: row_no,
            message: format!("score `{}` is not a number", field(cs)),
        })?;
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(DataError::InvalidRow {
                row: row_no,
                message: format!("score {score} outside [0, 1]"),
            });
        }
        let group = field(cg);
        if group.is_empty() {
            return Err(DataError::InvalidRow {
                row: row_no,
                message: "empty group label".into(),
            });
        }
        records.push(SampleRecord {
            entity_id: field(ci).to_string(),
            outcome,
            group: group.to_string(),
            score,
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyInput);
    }
    Dataset::new(records)
}

/// Writes the canonical four-column CSV (`entity_id,outcome,group,score`).
pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["entity_id", "outcome", "group", "score"])?;
    for r in dataset.records() {
        w.write_record([
            r.entity_id.as_str(),
            if r.outcome { "1" } else { "0" },
            r.group.as_str(),
            &r.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shape parameters of a Beta score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaShape {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        BetaShape { alpha, beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroup {
    pub label: String,
    pub size: usize,
    pub prevalence: f64,
    /// Score distribution of units with the adverse outcome.
    #[serde(default = "default_positive_shape")]
    pub positive_scores: BetaShape,
    /// Score distribution of units without it.
    #[serde(default = "default_negative_shape")]
    pub negative_scores: BetaShape,
}

fn default_positive_shape() -> BetaShape {
    BetaShape::new(3.0, 5.0)
}

fn default_negative_shape() -> BetaShape {
    BetaShape::new(2.0, 8.0)
}

/// Synthetic dataset description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub groups: Vec<SyntheticGroup>,
    /// Probability that a record continues the previous entity of its group
    /// instead of starting a new one.
    #[serde(default)]
    pub repeat_probability: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SyntheticConfig {
    /// Four groups with the relative sizes and outcome prevalences of a
    /// child-welfare reunification population, and group-dependent score
    /// shapes so that error rates differ across groups at shared cuts.
    pub fn welfare_like(total: usize) -> Self {
        let shapes: [(&str, f64, f64, BetaShape, BetaShape); 4] = [
            ("BL", 0.05, 0.21, BetaShape::new(3.4, 5.6), BetaShape::new(2.8, 6.4)),
            ("HPA", 0.19, 0.14, BetaShape::new(2.6, 6.8), BetaShape::new(1.5, 8.6)),
            ("NV", 0.10, 0.20, BetaShape::new(3.1, 6.0), BetaShape::new(2.1, 7.4)),
            ("WH", 0.66, 0.17, BetaShape::new(2.9, 6.2), BetaShape::new(1.8, 7.9)),
        ];
        let mut groups: Vec<SyntheticGroup> = shapes
            .iter()
            .map(|(label, share, prevalence, pos, neg)| SyntheticGroup {
                label: (*label).into(),
                size: ((total as f64) * share).round().max(1.0) as usize,
                prevalence: *prevalence,
                positive_scores: *pos,
                negative_scores: *neg,
            })
            .collect();
        let assigned: usize = groups.iter().map(|g| g.size).sum();
        let last = groups.len() - 1;
        groups[last].size = (groups[last].size + total).saturating_sub(assigned).max(1);
        SyntheticConfig {
            groups,
            repeat_probability: 0.3,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |field: String, message: String| Err(DataError::Config { field, message });
        if self.groups.is_empty() {
            return err("groups".into(), "at least one group is required".into());
        }
        if !(0.0..1.0).contains(&self.repeat_probability) {
            return err(
                "repeat_probability".into(),
                format!("{} is outside [0, 1)", self.repeat_probability),
            );
        }
        let mut labels = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            if g.label.is_empty() {
                return err(format!("groups[{i}].label"), "empty label".into());
            }
            if !labels.insert(g.label.as_str()) {
                return err(format!("groups[{i}].label"), format!("duplicate label `{}`", g.label));
            }
            if g.size == 0 {
                return err(format!("groups[{i}].size"), "must be at least 1".into());
            }
            if !(g.prevalence > 0.0 && g.prevalence < 1.0) {
                return err(
                    format!("groups[{i}].prevalence"),
                    format!("{} is outside (0, 1)", g.prevalence),
                );
            }
            for (name, s) in [("positive_scores", g.positive_scores), ("negative_scores", g.negative_scores)] {
                if !(s.alpha > 0.0 && s.beta > 0.0 && s.alpha.is_finite() && s.beta.is_finite()) {
                    return err(
                        format!("groups[{i}].{name}"),
                        "alpha and beta must be positive".into(),
                    );
                }
            }
        }
        Ok(())
    }
}

/// Draws a dataset from outcome-conditional Beta score distributions.
/// Identical `(config, seed)` pairs give identical datasets.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(config.groups.iter().map(|g| g.size).sum());
    for g in &config.groups {
        let pos = Beta::new(g.positive_scores.alpha, g.positive_scores.beta).map_err(|e| DataError::Config {
            field: format!("{}.positive_scores", g.label),
            message: e.to_string(),
        })?;
        let neg = Beta::new(g.negative_scores.alpha, g.negative_scores.beta).map_err(|e| DataError::Config {
            field: format!("{}.negative_scores", g.label),
            message: e.to_string(),
        })?;
        let mut entity = 0usize;
        for i in 0..g.size {
            if i > 0 && !rng.random_bool(config.repeat_probability) {
                entity += 1;
            }
            let outcome = rng.random_bool(g.prevalence);
            let score: f64 = if outcome { pos.sample(&mut rng) } else { neg.sample(&mut rng) };
            records.push(SampleRecord {
                entity_id: format!("{}-{}", g.label, entity),
                outcome,
                group: g.label.clone(),
                score: score.clamp(0.0, 1.0),
            });
        }
    }
    Dataset::new(records)
}

/// One relabeling performed by [`merge_small_groups`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub source: String,
    pub target: String,
    pub source_size: usize,
    pub source_prevalence: f64,
    pub target_prevalence: f64,
    pub prevalence_gap: f64,
}

/// Relabels each group smaller than `min_size` into the qualifying group with
/// the nearest outcome prevalence. Small groups are handled smallest first,
/// against target prevalences updated by earlier merges. Ties go to the larger
/// target, then to the earlier label.
pub fn merge_small_groups(dataset: &Dataset, min_size: usize) -> Result<(Dataset, Vec<MergeEvent>), DataError> {
    let mut tallies: Vec<(usize, usize)> = dataset.group_tallies();
    let groups = dataset.groups();
    let qualifying: Vec<usize> = (0..groups.len()).filter(|&g| tallies[g].0 >= min_size).collect();
    if qualifying.is_empty() {
        return Err(DataError::Unmergeable { min_size });
    }
    let mut small: Vec<usize> = (0..groups.len()).filter(|&g| tallies[g].0 < min_size).collect();
    if small.is_empty() {
        return Ok((dataset.clone(), Vec::new()));
    }
    small.sort_by_key(|&g| (tallies[g].0, g));

    let prevalence = |t: (usize, usize)| t.1 as f64 / t.0 as f64;
    let mut relabel: Vec<usize> = (0..groups.len()).collect();
    let mut log = Vec::new();
    for s in small {
        let sp = prevalence(tallies[s]);
        let target = *qualifying
            .iter()
            .min_by(|&&a, &&b| {
                let da = (prevalence(tallies[a]) - sp).abs();
                let db = (prevalence(tallies[b]) - sp).abs();
                da.total_cmp(&db)
                    .then_with(|| tallies[b].0.cmp(&tallies[a].0))
                    .then_with(|| a.cmp(&b))
            })
            .expect("qualifying is nonempty");
        let tp = prevalence(tallies[target]);
        log.push(MergeEvent {
            source: groups[s].clone(),
            target: groups[target].clone(),
            source_size: tallies[s].0,
            source_prevalence: sp,
            target_prevalence: tp,
            prevalence_gap: (tp - sp).abs(),
        });
        tallies[target].0 += tallies[s].0;
        tallies[target].1 += tallies[s].1;
        relabel[s] = target;
    }
    let records = dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| SampleRecord {
            group: groups[relabel[dataset.group_index(i)]].clone(),
            ..r.clone()
        })
        .collect();
    let vocab = qualifying.iter().map(|&g| groups[g].clone()).collect();
    Ok((Dataset::with_vocabulary(records, vocab)?, log))
}

/// Writes one JSON object per merge event.
pub fn write_merge_log<W: Write>(events: &[MergeEvent], mut writer: W) -> Result<(), DataError> {
    for e in events {
        serde_json::to_writer(&mut writer, e).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Record positions with at most one record per entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    pub indices: Vec<usize>,
    pub seed_tag: u64,
}

impl Subsample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Picks one record per entity, uniformly among that entity's records.
pub fn draw_subsample<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R, seed_tag: u64) -> Result<Subsample, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let indices = dataset
        .entities()
        .iter()
        .map(|recs| {
            if recs.len() == 1 {
                recs[0]
            } else {
                recs[rng.random_range(0..recs.len())]
            }
        })
        .collect();
    Ok(Subsample { indices, seed_tag })
}

/// Independent random streams; `stream` separates purposes (correction vs
/// evaluation) and `index` separates draws within a purpose.
pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> (ChaCha8Rng, u64) {
    let tag = stream_seed(seed, stream, index);
    (ChaCha8Rng::seed_from_u64(tag), tag)
}

/// Empirical outcome prevalence per group label.
pub fn prevalence_by_group(dataset: &Dataset) -> BTreeMap<String, f64> {
    dataset
        .groups()
        .iter()
        .zip(dataset.group_tallies())
        .map(|(g, (n, p))| (g.clone(), p as f64 / n as f64))
        .collect()
}
