//! Penalized, constrained search for group-specific cuts.
//!
//! For one cut `t` the objective is
//!
//! ```text
//! f(θ) = (1 - w) · (1 - M(θ)) + w · Δ(θ, Φ_t)
//! ```
//!
//! where `M` is the fairness measure of the chosen definition and `Δ` the
//! share of units whose side of the cut changes when moving from the shared
//! cut `Φ_t` to the group cuts `θ`. Calibration uses one joint problem over
//! all three cuts instead, summing `1 - CAL` over the four tier labels.
//!
//! Both `M` and `Δ` only change when a cut crosses an observed score, so each
//! coordinate is searched exactly over one representative per score gap.

use serde::{Deserialize, Serialize};

use crate::error::OptimizeError;
use crate::metrics::{
    calibration_min, flips_in_group, min_pairwise, pairwise_min_from_counts, ConfusionCounts, FairnessDefinition, SubsampleView,
};
use crate::tiers::{AgnosticTiers, ThresholdMatrix, Tier, TierLabel};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    /// Shrink applied to strict inequality constraints.
    pub epsilon: f64,
    /// Objective differences at or below this are ties.
    pub tie_tolerance: f64,
    /// Safety cap on full coordinate passes.
    pub max_passes: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            epsilon: DEFAULT_EPSILON,
            tie_tolerance: 1e-12,
            max_passes: 200,
        }
    }
}

/// Nearest-rank percentile of ascending data: the value at 1-based rank
/// `ceil(p · n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

/// Shared cuts of a subsample: the mean score, the median of scores strictly
/// below it, and the 75th percentile of scores strictly above it.
pub fn agnostic_tiers(view: &SubsampleView) -> Result<AgnosticTiers, OptimizeError> {
    let scores = view.all_scores();
    if scores.is_empty() {
        return Err(OptimizeError::DegenerateScores("no scores".into()));
    }
    let average = scores.iter().sum::<f64>() / scores.len() as f64;
    let below_end = scores.partition_point(|&s| s < average);
    let above_start = scores.partition_point(|&s| s <= average);
    let low = nearest_rank(&scores[..below_end], 0.5);
    let high = nearest_rank(&scores[above_start..], 0.75);
    match (low, high) {
        (Some(low), Some(high)) if low < average && average < high => Ok(AgnosticTiers { low, average, high }),
        _ => Err(OptimizeError::DegenerateScores(format!(
            "need scores on both sides of the mean {average}"
        ))),
    }
}

/// Candidate cuts for `group` on the closed range `[lower, upper]`.
///
/// The range splits into classes of cuts that predict the same units
/// positive. One representative per class is returned, ascending: `lower`
/// for the first class, `upper` for the last, gap midpoints in between. The
/// class holding `anchor` (clamped into the range) is represented by the
/// anchor itself.
pub fn candidates_closed(
    view: &SubsampleView,
    group: usize,
    lower: f64,
    upper: f64,
    anchor: Option<f64>,
) -> Vec<f64> {
    debug_assert!(lower <= upper);
    let g = view.group(group);
    let scores = g.scores();
    let start = g.below(lower);
    let end = g.below(upper);
    let mut breaks: Vec<f64> = Vec::new();
    for &s in &scores[start..end] {
        if breaks.last() != Some(&s) {
            breaks.push(s);
        }
    }
    let mut reps = Vec::with_capacity(breaks.len() + 1);
    reps.push(lower);
    for w in breaks.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        reps.push(if mid > w[0] { mid } else { w[1] });
    }
    if !breaks.is_empty() {
        // Every break is below `upper`, so (last, upper] is never empty.
        reps.push(upper);
    }
    if let Some(a) = anchor {
        let a = a.clamp(lower, upper);
        let class = breaks.partition_point(|&s| s < a);
        reps[class] = a;
    }
    reps.dedup();
    reps
}

/// Candidate cuts for `group` strictly inside `(lo, hi)`, with the strict
/// bounds shrunk by `epsilon`.
pub fn candidate_cuts(
    view: &SubsampleView,
    group: usize,
    lo: f64,
    hi: f64,
    anchor: Option<f64>,
    epsilon: f64,
) -> Result<Vec<f64>, OptimizeError> {
    let (a, b) = (lo + epsilon, hi - epsilon);
    if a > b {
        return Err(OptimizeError::Infeasible {
            tier: Tier::Average,
            group: view.groups()[group].clone(),
            lower: a,
            upper: b,
        });
    }
    Ok(candidates_closed(view, group, a, b, anchor))
}

/// Objective broken into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// `+∞` when the fairness term is undefined.
    pub total: f64,
    pub fairness_term: Option<f64>,
    pub penalty_term: f64,
}

#[inline]
fn combine(w: f64, fairness_gap: Option<f64>, delta: f64) -> ObjectiveValue {
    let penalty_term = w * delta;
    let fairness_term = if w == 1.0 {
        Some(0.0)
    } else {
        fairness_gap.map(|g| (1.0 - w) * g)
    };
    ObjectiveValue {
        total: fairness_term.map_or(f64::INFINITY, |f| f + penalty_term),
        fairness_term,
        penalty_term,
    }
}

fn check_weight(w: f64) -> Result<(), OptimizeError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(OptimizeError::InvalidWeight(w))
    }
}

/// Single-cut objective. During search a measure with any undefined pair
/// counts as undefined.
pub fn objective(
    view: &SubsampleView,
    def: FairnessDefinition,
    w: f64,
    thetas: &[f64],
    phi: f64,
) -> Result<ObjectiveValue, OptimizeError> {
    check_weight(w)?;
    if def.is_calibration() {
        return Err(crate::error::MetricsError::CalibrationNeedsMatrix.into());
    }
    let counts = view.counts_at(thetas)?;
    let flips: usize = (0..view.group_count())
        .map(|g| flips_in_group(view.group(g), phi, thetas[g]))
        .sum();
    Ok(tier_objective(def, w, &counts, flips, view.len()))
}

#[inline]
fn tier_objective(def: FairnessDefinition, w: f64, counts: &[ConfusionCounts], flips: usize, n: usize) -> ObjectiveValue {
    let m = pairwise_min_from_counts(def, counts).strict_value();
    let delta = if n == 0 { 0.0 } else { flips as f64 / n as f64 };
    combine(w, m.map(|m| 1.0 - m), delta)
}

/// Joint calibration objective over a full matrix.
pub fn calibration_objective(
    view: &SubsampleView,
    w: f64,
    matrix: &ThresholdMatrix,
) -> Result<ObjectiveValue, OptimizeError> {
    check_weight(w)?;
    let cuts = crate::metrics::aligned_cuts(view, matrix)?;
    let anchors = matrix.anchors();
    let from = [anchors.low, anchors.average, anchors.high];
    let changed: usize = (0..view.group_count())
        .map(|g| view.group(g).tier_changes(from, cuts[g]))
        .sum();
    Ok(cal_objective(view, w, &cuts, changed))
}

fn cal_objective(view: &SubsampleView, w: f64, cuts: &[[f64; 3]], changed: usize) -> ObjectiveValue {
    let mut gap = Some(0.0);
    for label in TierLabel::ALL {
        gap = match (gap, calibration_min(view, cuts, label).strict_value()) {
            (Some(acc), Some(v)) => Some(acc + (1.0 - v)),
            _ => None,
        };
    }
    let delta = if view.is_empty() { 0.0 } else { changed as f64 / view.len() as f64 };
    combine(w, gap, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSolution {
    pub thetas: Vec<f64>,
    pub objective: ObjectiveValue,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSolution {
    pub matrix: ThresholdMatrix,
    pub objective: ObjectiveValue,
    pub passes: usize,
}

/// Closed per-group bounds for one cut, after the epsilon shrink.
pub fn tier_bounds(
    view: &SubsampleView,
    tier: Tier,
    anchors: &AgnosticTiers,
    lower_bounds: Option<&[f64]>,
    epsilon: f64,
) -> Result<Vec<(f64, f64)>, OptimizeError> {
    let k = view.group_count();
    let prev = |g: usize, fallback: f64| lower_bounds.map_or(fallback, |lb| lb[g]);
    if let Some(lb) = lower_bounds {
        if lb.len() != k {
            return Err(crate::error::MetricsError::ThresholdCount {
                expected: k,
                found: lb.len(),
            }
            .into());
        }
    }
    (0..k)
        .map(|g| {
            let (a, b) = match tier {
                // Each low cut stays below the shared average cut so the
                // average cut of every group has room above it.
                Tier::Low => (epsilon, anchors.average - epsilon),
                Tier::Average => (prev(g, anchors.low) + epsilon, anchors.high),
                Tier::High => (prev(g, anchors.average) + epsilon, 1.0 - epsilon),
            };
            if a > b {
                Err(OptimizeError::Infeasible {
                    tier,
                    group: view.groups()[g].clone(),
                    lower: a,
                    upper: b,
                })
            } else {
                Ok((a, b))
            }
        })
        .collect()
}

/// Lexicographic search key: escape count, objective (with tolerance),
/// distance to the anchor, value.
#[derive(Debug, Clone, Copy)]
struct Key {
    lead: usize,
    obj: f64,
    dist: f64,
    value: f64,
}

#[inline]
fn better(a: &Key, b: &Key, tol: f64) -> bool {
    if a.lead != b.lead {
        return a.lead < b.lead;
    }
    if a.obj.is_infinite() && b.obj.is_infinite() {
        return (a.dist, a.value) < (b.dist, b.value);
    }
    if a.obj < b.obj - tol {
        return true;
    }
    if a.obj > b.obj + tol {
        return false;
    }
    (a.dist, a.value) < (b.dist, b.value)
}

/// Group cuts for one tier by coordinate descent from the shared cut.
///
/// Groups are visited in vocabulary order and each visit searches that
/// group's candidates exactly with the others fixed. A move is accepted only
/// if it improves the objective, or ties it while moving closer to the shared
/// cut. When a move would break coveredness it is paired with moving one other
/// group onto the shared cut instead of being dropped. Once no such move
/// helps, a group move is also paired with moving one other group to the
/// candidates whose constituent value is closest to the moved group's new
/// value; this reaches optima where two groups must shift together to keep a
/// ratio balanced. The search stops when neither kind of move improves.
pub fn optimize_tier(
    view: &SubsampleView,
    def: FairnessDefinition,
    w: f64,
    tier: Tier,
    anchors: &AgnosticTiers,
    lower_bounds: Option<&[f64]>,
    opts: &SearchOptions,
) -> Result<TierSolution, OptimizeError> {
    check_weight(w)?;
    if def.is_calibration() {
        return Err(crate::error::MetricsError::CalibrationNeedsMatrix.into());
    }
    let phi = anchors.get(tier);
    let bounds = tier_bounds(view, tier, anchors, lower_bounds, opts.epsilon)?;
    let groups: Vec<GroupCandidates> = bounds
        .iter()
        .enumerate()
        .map(|(g, &(a, b))| GroupCandidates::new(view, def, g, a, b, phi))
        .collect();
    let k = groups.len();
    let at: Vec<usize> = groups.iter().map(|gc| gc.anchor).collect();
    let covered = |at: &[usize]| {
        let (lo, hi) = at
            .iter()
            .zip(&groups)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&i, gc)| {
                (lo.min(gc.cuts[i]), hi.max(gc.cuts[i]))
            });
        lo <= phi && phi <= hi
    };
    if !covered(&at) {
        return Err(OptimizeError::InfeasibleCoverage { tier });
    }
    let run = |escape: Escape| {
        let mut state = start_state(def, w, phi, view.len(), &groups, &at, escape);
        let passes = descend(&mut state, &covered, opts);
        (state, passes)
    };
    let (mut state, mut passes) = run(Escape::Off);
    // A zero rate against a positive one pins the measure at 0, and leaving
    // that plateau can take every group at once. States on it never beat the
    // start, so extra descents that first drive every group to one side are
    // safe; the best of all runs is kept.
    let start_mixed = start_state(def, w, phi, view.len(), &groups, &at, Escape::ToZero).lead() > 0;
    if w < 1.0 && k >= 2 && start_mixed {
        for escape in [Escape::ToZero, Escape::ToPositive] {
            let (mut other, p) = run(escape);
            other.escape = Escape::Off;
            let (a, b) = (other.key(other.objective().total), state.key(state.objective().total));
            if better(&a, &b, opts.tie_tolerance) {
                state = other;
                passes = p;
            }
        }
    }
    Ok(TierSolution {
        thetas: state.at.iter().zip(&groups).map(|(&i, gc)| gc.cuts[i]).collect(),
        objective: state.objective(),
        passes,
    })
}

fn start_state<'a>(
    def: FairnessDefinition,
    w: f64,
    phi: f64,
    n: usize,
    groups: &'a [GroupCandidates],
    at: &[usize],
    escape: Escape,
) -> DescentState<'a> {
    DescentState {
        def,
        w,
        phi,
        n,
        groups,
        at: at.to_vec(),
        counts: at.iter().zip(groups).map(|(&i, gc)| gc.counts[i]).collect(),
        flips_total: at.iter().zip(groups).map(|(&i, gc)| gc.flips[i]).sum(),
        escape,
    }
}

/// Single and repair moves until none improves, then one rate-matched pair
/// move, repeated. Returns the number of passes.
fn descend(state: &mut DescentState, covered: &impl Fn(&[usize]) -> bool, opts: &SearchOptions) -> usize {
    let groups = state.groups;
    let k = groups.len();
    let def = state.def;
    let phi = state.phi;
    let tol = opts.tie_tolerance;
    let n_constituents = def.constituents().len();
    let mut current = state.key(state.objective().total);
    let mut passes = 0;
    while passes < opts.max_passes {
        passes += 1;
        let mut moved = false;
        for g in 0..k {
            let mut best: Option<(Key, Vec<(usize, usize)>)> = None;
            for i in 0..groups[g].cuts.len() {
                if i == state.at[g] {
                    continue;
                }
                let mut trial_at = state.at.clone();
                trial_at[g] = i;
                let moves: Vec<Vec<(usize, usize)>> = if covered(&trial_at) {
                    vec![vec![(g, i)]]
                } else {
                    (0..k)
                        .filter(|&h| h != g && state.at[h] != groups[h].anchor)
                        .filter(|&h| {
                            let mut a = trial_at.clone();
                            a[h] = groups[h].anchor;
                            covered(&a)
                        })
                        .map(|h| vec![(g, i), (h, groups[h].anchor)])
                        .collect()
                };
                for m in moves {
                    let key = state.trial(&m);
                    if better(&key, best.as_ref().map_or(&current, |b| &b.0), tol) {
                        best = Some((key, m));
                    }
                }
            }
            if let Some((key, m)) = best {
                state.apply(&m);
                current = key;
                moved = true;
            }
        }
        if moved {
            continue;
        }
        if k < 2 {
            break;
        }
        let mut best: Option<(Key, [(usize, usize); 2])> = None;
        let mut near = Vec::new();
        for g in 0..k {
            for i in 0..groups[g].cuts.len() {
                if i == state.at[g] {
                    continue;
                }
                for c in 0..n_constituents {
                    let Some(target) = groups[g].counts[i].constituent(def.constituents()[c]) else {
                        continue;
                    };
                    for h in (0..k).filter(|&h| h != g) {
                        groups[h].nearest(c, target, phi, &mut near);
                        for &j in &near {
                            let mut trial_at = state.at.clone();
                            trial_at[g] = i;
                            trial_at[h] = j;
                            if !covered(&trial_at) {
                                continue;
                            }
                            let moves = [(g, i), (h, j)];
                            let key = state.trial(&moves);
                            if better(&key, best.as_ref().map_or(&current, |b| &b.0), tol) {
                                best = Some((key, moves));
                            }
                        }
                    }
                }
            }
        }
        match best {
            Some((key, moves)) => {
                state.apply(&moves);
                current = key;
            }
            None => break,
        }
    }
    passes
}

/// Precomputed per-candidate state of one group.
struct GroupCandidates {
    cuts: Vec<f64>,
    counts: Vec<ConfusionCounts>,
    flips: Vec<usize>,
    /// Per constituent, candidate indices with a defined value, sorted by it.
    by_value: Vec<Vec<(f64, usize)>>,
    /// Index of the shared cut clamped into range.
    anchor: usize,
}

impl GroupCandidates {
    fn new(view: &SubsampleView, def: FairnessDefinition, g: usize, lower: f64, upper: f64, phi: f64) -> Self {
        let scores = view.group(g);
        let cuts = candidates_closed(view, g, lower, upper, Some(phi));
        let counts: Vec<ConfusionCounts> = cuts.iter().map(|&c| scores.confusion(c)).collect();
        let flips = cuts.iter().map(|&c| flips_in_group(scores, phi, c)).collect();
        let by_value = def
            .constituents()
            .iter()
            .map(|&k| {
                let mut v: Vec<(f64, usize)> = counts
                    .iter()
                    .enumerate()
                    .filter_map(|(i, cc)| cc.constituent(k).map(|x| (x, i)))
                    .collect();
                // Candidate indices ascend with the cut, so runs of equal value are ordered by cut.
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                v
            })
            .collect();
        let start = phi.clamp(lower, upper);
        let anchor = cuts.iter().position(|&c| c == start).expect("clamped anchor is a candidate");
        GroupCandidates {
            cuts,
            counts,
            flips,
            by_value,
            anchor,
        }
    }

    /// Candidates whose value of constituent `k` sits on the two closest
    /// levels at or below `target` and the two closest above it. Within a
    /// level of equal values, its lowest and highest cut and the cuts nearest
    /// the shared cut from either side are kept.
    fn nearest(&self, k: usize, target: f64, phi: f64, out: &mut Vec<usize>) {
        let list = &self.by_value[k];
        out.clear();
        let pos = list.partition_point(|&(v, _)| v <= target);
        let mut visit = |start: usize, end: usize| {
            let run = &list[start..end];
            let split = run.partition_point(|&(_, i)| self.cuts[i] < phi);
            for p in [0, split.saturating_sub(1), split.min(run.len() - 1), run.len() - 1] {
                let i = run[p].1;
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        };
        let mut end = pos;
        for _ in 0..2 {
            if end == 0 {
                break;
            }
            let v = list[end - 1].0;
            let start = list[..end].partition_point(|&(x, _)| x < v);
            visit(start, end);
            end = start;
        }
        let mut start = pos;
        for _ in 0..2 {
            if start == list.len() {
                break;
            }
            let v = list[start].0;
            let end = start + list[start..].partition_point(|&(x, _)| x <= v);
            visit(start, end);
            start = end;
        }
    }
}

/// Leading search count used to leave a zero-measure plateau.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Escape {
    Off,
    /// Groups with a positive value on a constituent that some group has at 0.
    ToZero,
    /// Groups at 0 on a constituent that some group has positive.
    ToPositive,
}

struct DescentState<'a> {
    def: FairnessDefinition,
    w: f64,
    phi: f64,
    n: usize,
    groups: &'a [GroupCandidates],
    at: Vec<usize>,
    counts: Vec<ConfusionCounts>,
    flips_total: usize,
    escape: Escape,
}

impl DescentState<'_> {
    fn lead(&self) -> usize {
        if self.escape == Escape::Off {
            return 0;
        }
        let mut lead = 0;
        for &c in self.def.constituents() {
            let (mut zero, mut positive) = (0, 0);
            for v in self.counts.iter().filter_map(|cc| cc.constituent(c)) {
                if v == 0.0 {
                    zero += 1;
                } else {
                    positive += 1;
                }
            }
            if zero > 0 && positive > 0 {
                lead += if self.escape == Escape::ToZero { positive } else { zero };
            }
        }
        lead
    }

    fn key(&self, obj: f64) -> Key {
        let cuts = self.at.iter().zip(self.groups).map(|(&i, gc)| gc.cuts[i]);
        let (dist, value) = cuts.fold((0.0, 0.0), |(d, s), c| (d + (c - self.phi).abs(), s + c));
        Key {
            lead: self.lead(),
            obj,
            dist,
            value,
        }
    }

    /// Key after moving each `(group, candidate)` in `moves`; state is restored.
    fn trial(&mut self, moves: &[(usize, usize)]) -> Key {
        let saved: Vec<usize> = moves.iter().map(|&(g, _)| self.at[g]).collect();
        let flips_before = self.flips_total;
        for &(g, i) in moves {
            self.flips_total = self.flips_total - self.groups[g].flips[self.at[g]] + self.groups[g].flips[i];
            self.at[g] = i;
            self.counts[g] = self.groups[g].counts[i];
        }
        let obj = tier_objective(self.def, self.w, &self.counts, self.flips_total, self.n).total;
        let key = self.key(obj);
        for (&(g, _), &i) in moves.iter().zip(&saved).rev() {
            self.at[g] = i;
            self.counts[g] = self.groups[g].counts[i];
        }
        self.flips_total = flips_before;
        key
    }

    fn apply(&mut self, moves: &[(usize, usize)]) {
        for &(g, i) in moves {
            self.flips_total = self.flips_total - self.groups[g].flips[self.at[g]] + self.groups[g].flips[i];
            self.at[g] = i;
            self.counts[g] = self.groups[g].counts[i];
        }
    }

    fn objective(&self) -> ObjectiveValue {
        tier_objective(self.def, self.w, &self.counts, self.flips_total, self.n)
    }
}

/// Per-group `(units, adverse)` in each of the four tier bins.
type Cells = [(usize, usize); 4];

fn cells_of(view: &SubsampleView, g: usize, cuts: [f64; 3]) -> Cells {
    let scores = view.group(g);
    TierLabel::ALL.map(|label| scores.in_tier(cuts, label))
}

/// Search score of a calibration state. Empty bins leave the measure
/// undefined; they are counted so the search can move towards states where
/// every bin is populated.
#[derive(Debug, Clone, Copy)]
struct CalKey {
    empty: usize,
    key: Key,
}

fn cal_better(a: &CalKey, b: &CalKey, tol: f64) -> bool {
    match a.empty.cmp(&b.empty) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => better(&a.key, &b.key, tol),
    }
}

/// A move of cut `t` of group `g` to value `c`.
type CalMove = (usize, usize, f64);

struct CalState<'a> {
    view: &'a SubsampleView,
    w: f64,
    phi: [f64; 3],
    eps: f64,
    cuts: Vec<[f64; 3]>,
    cells: Vec<Cells>,
    changed: Vec<usize>,
    changed_total: usize,
}

impl CalState<'_> {
    /// Feasible range of cut `t` of group `g` given its other two cuts.
    fn range(&self, t: usize, g: usize) -> Option<(f64, f64)> {
        let c = self.cuts[g];
        let (a, b) = match t {
            0 => (self.eps, c[1] - self.eps),
            1 => (c[0] + self.eps, c[2] - self.eps),
            _ => (c[1] + self.eps, 1.0 - self.eps),
        };
        (a <= b).then_some((a, b))
    }

    /// The search key and the reported objective.
    fn score(&self) -> (CalKey, ObjectiveValue) {
        self.score_with(&[])
    }

    /// Scores the state with some groups replaced by `(group, cuts, cells)`.
    fn score_with(&self, overrides: &[(usize, [f64; 3], Cells, usize)]) -> (CalKey, ObjectiveValue) {
        let k = self.cells.len();
        let find = |g: usize| overrides.iter().find(|o| o.0 == g);
        let cells = |g: usize| find(g).map_or(&self.cells[g], |o| &o.2);
        let cuts = |g: usize| find(g).map_or(self.cuts[g], |o| o.1);
        let changed_total = overrides
            .iter()
            .fold(self.changed_total, |acc, o| acc - self.changed[o.0] + o.3);
        let mut empty = 0;
        let mut gap = 0.0;
        for s in 0..4 {
            empty += (0..k).filter(|&g| cells(g)[s].0 == 0).count();
            let pm = min_pairwise(k, 1, |g, _| {
                let (n, a) = cells(g)[s];
                (n > 0).then(|| a as f64 / n as f64)
            });
            if let Some(v) = pm.strict_value() {
                gap += 1.0 - v;
            }
        }
        if k < 2 || self.w == 1.0 {
            empty = 0;
        }
        let n = self.view.len();
        let delta = if n == 0 { 0.0 } else { changed_total as f64 / n as f64 };
        let reported = combine(self.w, (empty == 0).then_some(gap), delta);
        let searched = combine(self.w, Some(gap), delta).total;
        let (mut dist, mut value) = (0.0, 0.0);
        for g in 0..k {
            for (c, p) in cuts(g).iter().zip(&self.phi) {
                dist += (c - p).abs();
                value += c;
            }
        }
        let key = Key {
            lead: 0,
            obj: searched,
            dist,
            value,
        };
        (CalKey { empty, key }, reported)
    }

    fn set(&mut self, (t, g, c): CalMove) {
        self.cuts[g][t] = c;
        self.cells[g] = cells_of(self.view, g, self.cuts[g]);
        let ch = self.view.group(g).tier_changes(self.phi, self.cuts[g]);
        self.changed_total = self.changed_total - self.changed[g] + ch;
        self.changed[g] = ch;
    }

    /// Key after the moves, leaving the state unchanged. Each move touches a
    /// different group.
    fn trial(&self, moves: &[CalMove]) -> CalKey {
        let mut overrides = [(0, [0.0; 3], [(0, 0); 4], 0); 2];
        for (o, &(t, g, c)) in overrides.iter_mut().zip(moves) {
            let mut cuts = self.cuts[g];
            cuts[t] = c;
            *o = (g, cuts, cells_of(self.view, g, cuts), self.view.group(g).tier_changes(self.phi, cuts));
        }
        self.score_with(&overrides[..moves.len()]).0
    }

    /// Coveredness of tier `t` after moving the listed groups' cuts.
    fn covered_with(&self, t: usize, moves: &[(usize, f64)]) -> bool {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (g, c) in self.cuts.iter().enumerate() {
            let v = moves.iter().find(|m| m.0 == g).map_or(c[t], |m| m.1);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        lo <= self.phi[t] && self.phi[t] <= hi
    }
}

/// Joint search over all `3K` cuts for calibration, cycling coordinates
/// tier by tier and group by group. Each group keeps
/// `0 < low < average < high < 1` (shrunk by epsilon) and each tier keeps its
/// shared cut within the group range.
///
/// Moves follow the single-cut search: a cut move that would break
/// coveredness is paired with moving another group's cut onto the shared cut,
/// and once nothing improves, cut moves are paired with a second group's cut
/// at the same tier placed where its adjacent-bin adverse rates are closest.
pub fn optimize_calibration(
    view: &SubsampleView,
    w: f64,
    anchors: &AgnosticTiers,
    opts: &SearchOptions,
) -> Result<CalibrationSolution, OptimizeError> {
    check_weight(w)?;
    let k = view.group_count();
    let eps = opts.epsilon;
    let phi = [anchors.low, anchors.average, anchors.high];
    if !(eps <= phi[0] && phi[0] + eps <= phi[1] && phi[1] + eps <= phi[2] && phi[2] <= 1.0 - eps) {
        return Err(OptimizeError::DegenerateScores(format!(
            "shared cuts {phi:?} leave no room for strict ordering"
        )));
    }
    let mut state = CalState {
        view,
        w,
        phi,
        eps,
        cuts: vec![phi; k],
        cells: (0..k).map(|g| cells_of(view, g, phi)).collect(),
        changed: vec![0; k],
        changed_total: 0,
    };
    let tol = opts.tie_tolerance;
    let mut current = state.score().0;
    let mut passes = 0;
    let mut paired = false;
    let mut picks = Vec::new();
    while passes < opts.max_passes {
        passes += 1;
        let mut moved = false;
        for t in 0..3 {
            for g in 0..k {
                let Some((a, b)) = state.range(t, g) else { continue };
                let now = state.cuts[g][t];
                let mut best: Option<(CalKey, [CalMove; 2], usize)> = None;
                let mut consider = |state: &CalState, moves: &[CalMove], current: &CalKey| {
                    let key = state.trial(moves);
                    if cal_better(&key, best.as_ref().map_or(current, |b| &b.0), tol) {
                        let mut kept = [moves[0]; 2];
                        kept[..moves.len()].copy_from_slice(moves);
                        best = Some((key, kept, moves.len()));
                    }
                };
                let partners = if paired { rated_partners(&state, t, g) } else { Vec::new() };
                for c in candidates_closed(view, g, a, b, Some(phi[t])) {
                    if c == now {
                        continue;
                    }
                    if state.covered_with(t, &[(g, c)]) {
                        consider(&state, &[(t, g, c)], &current);
                    } else {
                        for h in (0..k).filter(|&h| h != g) {
                            let Some((ha, hb)) = state.range(t, h) else { continue };
                            let reset = phi[t].clamp(ha, hb);
                            if reset != state.cuts[h][t] && state.covered_with(t, &[(g, c), (h, reset)]) {
                                consider(&state, &[(t, g, c), (t, h, reset)], &current);
                            }
                        }
                    }
                    if !paired {
                        continue;
                    }
                    let mut moved_cuts = state.cuts[g];
                    moved_cuts[t] = c;
                    let targets = adjacent_rates(view, g, moved_cuts, t);
                    for partner in &partners {
                        let h = partner.group;
                        closest_rates(partner, &targets, &mut picks);
                        for &hc in &picks {
                            if hc != state.cuts[h][t] && state.covered_with(t, &[(g, c), (h, hc)]) {
                                consider(&state, &[(t, g, c), (t, h, hc)], &current);
                            }
                        }
                    }
                }
                if let Some((key, moves, len)) = best {
                    for &m in &moves[..len] {
                        state.set(m);
                    }
                    current = key;
                    moved = true;
                }
            }
        }
        if moved {
            paired = false;
            continue;
        }
        if paired || k < 2 {
            break;
        }
        paired = true;
    }
    let objective = state.score().1;
    let column = |t: usize| state.cuts.iter().map(|c| c[t]).collect::<Vec<_>>();
    let matrix = ThresholdMatrix::new(view.groups().to_vec(), column(0), column(1), column(2), *anchors)
        .expect("shape follows the view");
    Ok(CalibrationSolution {
        matrix,
        objective,
        passes,
    })
}

/// Another group's candidates for one cut, sorted by the adverse rate of
/// the bin below the cut and of the bin above it.
struct RatedPartner {
    group: usize,
    by_side: [Vec<(f64, f64)>; 2],
}

fn rated_partners(state: &CalState, t: usize, g: usize) -> Vec<RatedPartner> {
    (0..state.cuts.len())
        .filter(|&h| h != g)
        .filter_map(|h| {
            let (a, b) = state.range(t, h)?;
            let mut cuts = state.cuts[h];
            let mut by_side: [Vec<(f64, f64)>; 2] = Default::default();
            for c in candidates_closed(state.view, h, a, b, Some(state.phi[t])) {
                cuts[t] = c;
                for (side, rate) in adjacent_rates(state.view, h, cuts, t).into_iter().enumerate() {
                    if let Some(r) = rate {
                        by_side[side].push((r, c));
                    }
                }
            }
            for v in &mut by_side {
                v.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
            }
            Some(RatedPartner { group: h, by_side })
        })
        .collect()
}

/// The three partner cuts closest in each adjacent-bin rate.
fn closest_rates(partner: &RatedPartner, targets: &[Option<f64>; 2], out: &mut Vec<f64>) {
    out.clear();
    for (sorted, target) in partner.by_side.iter().zip(targets) {
        let Some(target) = *target else { continue };
        let (mut l, mut r) = {
            let i = sorted.partition_point(|x| x.0 < target);
            (i, i)
        };
        for _ in 0..3 {
            let take_right = match (l.checked_sub(1).map(|i| sorted[i]), sorted.get(r)) {
                (None, None) => break,
                (None, Some(_)) => true,
                (Some(_), None) => false,
                (Some(left), Some(right)) => {
                    let (dl, dr) = (target - left.0, right.0 - target);
                    dr < dl || (dr == dl && right.1 < left.1)
                }
            };
            if take_right {
                out.push(sorted[r].1);
                r += 1;
            } else {
                out.push(sorted[l - 1].1);
                l -= 1;
            }
        }
    }
}

/// Adverse rates of the two bins on either side of cut `t`.
fn adjacent_rates(view: &SubsampleView, g: usize, cuts: [f64; 3], t: usize) -> [Option<f64>; 2] {
    let scores = view.group(g);
    [t, t + 1].map(|s| {
        let (n, a) = scores.in_tier(cuts, TierLabel::ALL[s]);
        (n > 0).then(|| a as f64 / n as f64)
    })
}

/// Full matrix for one subsample: low, then average, then high cut, each
/// bounded below by the previous tier's solution; or the joint calibration
/// problem.
pub fn solve_subsample(
    view: &SubsampleView,
    def: FairnessDefinition,
    w: f64,
    anchors: &AgnosticTiers,
    opts: &SearchOptions,
) -> Result<ThresholdMatrix, OptimizeError> {
    if def.is_calibration() {
        return Ok(optimize_calibration(view, w, anchors, opts)?.matrix);
    }
    let low = optimize_tier(view, def, w, Tier::Low, anchors, None, opts)?;
    let average = optimize_tier(view, def, w, Tier::Average, anchors, Some(&low.thetas), opts)?;
    let high = optimize_tier(view, def, w, Tier::High, anchors, Some(&average.thetas), opts)?;
    Ok(ThresholdMatrix::new(view.groups().to_vec(), low.thetas, average.thetas, high.thetas, *anchors)
        .expect("shape follows the view"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionCounts;

    fn view(rows: Vec<Vec<(f64, bool)>>) -> SubsampleView {
        let groups = (0..rows.len()).map(|g| format!("g{g}")).collect();
        SubsampleView::from_group_rows(groups, rows)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn leaves_zero_rate_plateau_needing_three_moves() {
        // g0 has no false negatives anywhere in the low-cut range, so the
        // measure stays 0 until g1, g2 and g3 all drop below their lowest
        // adverse score together.
        let v = view(vec![
            vec![(0.2, false), (0.3, false), (0.6, false), (0.8, true), (0.9, true)],
            vec![(0.05, true), (0.15, false), (0.35, false), (0.6, false), (0.7, true)],
            vec![(0.1, true), (0.2, false), (0.4, false), (0.6, false), (0.9, true)],
            vec![(0.08, true), (0.3, false), (0.45, false), (0.55, false), (0.85, true)],
        ]);
        let anchors = AgnosticTiers::new(0.25, 0.5, 0.75).unwrap();
        let opts = SearchOptions::default();
        let start = objective(&v, FairnessDefinition::ERB, 0.0, &[0.25; 4], 0.25).unwrap();
        assert_eq!(start.total, 1.0);
        let sol = optimize_tier(&v, FairnessDefinition::ERB, 0.0, Tier::Low, &anchors, None, &opts).unwrap();
        assert!(sol.objective.total < 1.0, "{sol:?}");
        assert_eq!(sol.thetas[0], 0.25);
    }

    #[test]
    fn agnostic_cuts_by_hand() {
        let v = view(vec![vec![(0.1, false), (0.2, true), (0.3, false), (0.9, true)]]);
        let a = agnostic_tiers(&v).unwrap();
        assert!(close(a.average, 0.375));
        assert_eq!(a.low, 0.2);
        assert_eq!(a.high, 0.9);
    }

    #[test]
    fn constant_scores_are_degenerate() {
        let v = view(vec![vec![(0.5, false); 6]]);
        assert!(matches!(agnostic_tiers(&v), Err(OptimizeError::DegenerateScores(_))));
    }

    #[test]
    fn nearest_rank_matches_counting_definition() {
        // Smallest x with at least p·n values at or below it.
        fn by_counting(xs: &[f64], p: f64) -> f64 {
            let need = p * xs.len() as f64;
            *xs.iter()
                .filter(|&&x| xs.iter().filter(|&&y| y <= x).count() as f64 >= need)
                .min_by(|a, b| a.total_cmp(b))
                .unwrap()
        }
        let mut xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        xs.sort_by(f64::total_cmp);
        for p in [0.5, 0.75, 0.1, 0.999] {
            assert_eq!(nearest_rank(&xs, p).unwrap(), by_counting(&xs, p));
        }
        assert_eq!(nearest_rank(&[], 0.5), None);
    }

    #[test]
    fn midpoint_candidate() {
        let v = view(vec![vec![(0.2, false), (0.4, true)]]);
        let c = candidate_cuts(&v, 0, 0.0, 1.0, None, DEFAULT_EPSILON).unwrap();
        assert!(c.iter().any(|&x| close(x, 0.3)));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn no_scores_in_range_gives_clamped_anchor() {
        let v = view(vec![vec![(0.1, false), (0.9, true)]]);
        assert_eq!(candidates_closed(&v, 0, 0.3, 0.6, Some(0.8)), vec![0.6]);
        assert_eq!(candidates_closed(&v, 0, 0.3, 0.6, Some(0.4)), vec![0.4]);
    }

    #[test]
    fn candidates_separate_distinct_outcomes() {
        let rows: Vec<(f64, bool)> = (0..50).map(|i| ((((i + 1) * 37) % 101) as f64 / 101.0, i % 3 == 0)).collect();
        let v = view(vec![rows.clone()]);
        let c = candidate_cuts(&v, 0, 0.0, 1.0, Some(0.5), DEFAULT_EPSILON).unwrap();
        let counts: Vec<ConfusionCounts> = c
            .iter()
            .map(|&t| ConfusionCounts::tally(rows.iter().map(|&(s, y)| (y, s)), t))
            .collect();
        assert!(counts.windows(2).all(|w| w[0] != w[1]));
        // Every achievable split of the group appears once.
        assert_eq!(c.len(), 51);
    }

    #[test]
    fn anchor_replaces_its_class_representative() {
        let v = view(vec![vec![(0.2, false), (0.4, true), (0.6, true)]]);
        let c = candidates_closed(&v, 0, 0.05, 0.95, Some(0.33));
        assert_eq!(c, vec![0.05, 0.33, 0.5, 0.95]);
    }

    #[test]
    fn objective_limits() {
        let v = view(vec![
            vec![(0.1, false), (0.3, true), (0.6, false), (0.8, true)],
            vec![(0.2, false), (0.5, false), (0.7, true)],
        ]);
        let phi = 0.45;
        let at_phi = objective(&v, FairnessDefinition::ERB, 1.0, &[phi, phi], phi).unwrap();
        assert_eq!(at_phi.total, 0.0);
        for w in [0.0, 0.4] {
            assert_eq!(objective(&v, FairnessDefinition::ERB, w, &[phi, phi], phi).unwrap().penalty_term, 0.0);
        }
        let m = crate::metrics::fairness_measure(&v, FairnessDefinition::ERB, &[0.25, 0.55]).unwrap();
        let o = objective(&v, FairnessDefinition::ERB, 0.0, &[0.25, 0.55], phi).unwrap();
        assert!(close(o.total, 1.0 - m.value.unwrap()));
        assert!(matches!(
            objective(&v, FairnessDefinition::ERB, 1.5, &[phi, phi], phi),
            Err(OptimizeError::InvalidWeight(_))
        ));
    }

    #[test]
    fn objective_by_hand() {
        // g0 at 0.5: tp1 fp1 tn2 fn1 → FNR 1/2, FPR 1/3.
        // g1 at 0.35: tp2 fp1 tn1 fn1 → FNR 1/3, FPR 1/2.
        let v = view(vec![
            vec![(0.1, false), (0.2, false), (0.4, true), (0.6, false), (0.9, true)],
            vec![(0.3, true), (0.32, false), (0.4, false), (0.7, true), (0.8, true)],
        ]);
        let phi = 0.45;
        let o = objective(&v, FairnessDefinition::ERB, 0.5, &[0.5, 0.35], phi).unwrap();
        // Min ratio 2/3; g0 flips nothing between 0.45 and 0.5, g1 flips 0.4.
        let expected = 0.5 * (1.0 - 2.0 / 3.0) + 0.5 * (1.0 / 10.0);
        assert!(close(o.total, expected));
        assert!(close(o.fairness_term.unwrap() + o.penalty_term, o.total));
    }

    fn welfareish() -> SubsampleView {
        let mut rows = vec![Vec::new(), Vec::new(), Vec::new()];
        for i in 0..90 {
            let g = i % 3;
            let y = (i * 13 + g * 7) % 5 < 2;
            let s = (((i * 29 + g * 17) % 97) as f64 / 97.0 * 0.8 + if y { 0.15 } else { 0.02 }).min(0.99);
            rows[g].push((s, y));
        }
        view(rows)
    }

    #[test]
    fn full_weight_keeps_shared_cuts() {
        let v = welfareish();
        let a = agnostic_tiers(&v).unwrap();
        let opts = SearchOptions::default();
        for def in FairnessDefinition::ALL {
            let m = solve_subsample(&v, def, 1.0, &a, &opts).unwrap();
            for tier in Tier::ALL {
                for &theta in m.tier(tier) {
                    assert!((theta - a.get(tier)).abs() <= opts.epsilon, "{def} {tier}");
                }
            }
        }
    }

    #[test]
    fn single_group_is_pinned_to_shared_cut() {
        let v = view(vec![(0..20).map(|i| (i as f64 / 21.0 + 0.01, i % 4 == 0)).collect()]);
        let a = agnostic_tiers(&v).unwrap();
        let s = optimize_tier(&v, FairnessDefinition::ERB, 0.0, Tier::Average, &a, None, &SearchOptions::default()).unwrap();
        assert_eq!(s.thetas, vec![a.average]);
    }

    #[test]
    fn infeasible_bounds_name_the_group() {
        let v = welfareish();
        let a = agnostic_tiers(&v).unwrap();
        let lower = vec![0.1, 1.0, 0.1];
        let err = optimize_tier(&v, FairnessDefinition::ERB, 0.5, Tier::High, &a, Some(&lower), &SearchOptions::default())
            .unwrap_err();
        match err {
            OptimizeError::Infeasible { group, tier, .. } => {
                assert_eq!(group, "g1");
                assert_eq!(tier, Tier::High);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn solutions_respect_constraints_and_improve_on_start() {
        let v = welfareish();
        let a = agnostic_tiers(&v).unwrap();
        let opts = SearchOptions::default();
        for def in FairnessDefinition::ALL {
            for w in [0.0, 0.3, 0.7] {
                let m = solve_subsample(&v, def, w, &a, &opts).unwrap();
                assert!(m.violations(0.0).is_empty(), "{def} w={w}: {:?}", m.violations(0.0));
            }
        }
        for w in [0.0, 0.5] {
            let sol = optimize_calibration(&v, w, &a, &opts).unwrap();
            let start = calibration_objective(&v, w, &ThresholdMatrix::replicated(v.groups().to_vec(), a)).unwrap();
            assert!(sol.objective.total <= start.total);
            let again = calibration_objective(&v, w, &sol.matrix).unwrap();
            assert!(close(again.total, sol.objective.total));
        }
    }

    #[test]
    fn tier_search_reports_its_own_objective() {
        let v = welfareish();
        let a = agnostic_tiers(&v).unwrap();
        let s = optimize_tier(&v, FairnessDefinition::ERB, 0.3, Tier::Low, &a, None, &SearchOptions::default()).unwrap();
        let o = objective(&v, FairnessDefinition::ERB, 0.3, &s.thetas, a.low).unwrap();
        assert_eq!(o, s.objective);
        let start = objective(&v, FairnessDefinition::ERB, 0.3, &[a.low; 3], a.low).unwrap();
        assert!(s.objective.total <= start.total);
    }
}
