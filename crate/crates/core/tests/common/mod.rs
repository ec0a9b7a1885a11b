//! Brute-force reference computations shared by the integration tests. They
//! tally rows one at a time and never call the library's counting code.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierfair::FairnessDefinition;

pub type Rows = Vec<Vec<(f64, bool)>>;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn tally(rows: &[(f64, bool)], cut: f64) -> Tally {
    let mut t = Tally::default();
    for &(s, adverse) in rows {
        match (s >= cut, adverse) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, false) => t.tn += 1,
            (false, true) => t.fn_ += 1,
        }
    }
    t
}

fn frac(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Per-group rates a definition compares, in the definition's order.
pub fn rates(def: FairnessDefinition, t: &Tally) -> Vec<Option<f64>> {
    use FairnessDefinition::*;
    let fnr = frac(t.fn_, t.tp + t.fn_);
    let fpr = frac(t.fp, t.fp + t.tn);
    let ppv = frac(t.tp, t.tp + t.fp);
    let npv = frac(t.tn, t.tn + t.fn_);
    let n = t.tp + t.fp + t.tn + t.fn_;
    match def {
        SP => vec![frac(t.tp + t.fp, n)],
        OAE => vec![frac(t.tp + t.tn, n)],
        PP => vec![ppv],
        EO => vec![fnr],
        PE => vec![fpr],
        ERB => vec![fnr, fpr],
        CUAE => vec![ppv, npv],
        TE => vec![frac(t.fp, t.fn_)],
        CAL => unreachable!("calibration is measured per bin"),
    }
}

/// Ratio of the smaller to the larger rate; equal zeros count as 1.
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a.min(b) / a.max(b)
    }
}

/// Minimum pairwise ratio over groups and rates. `strict` makes any
/// undefined rate undefine the whole measure; otherwise undefined pairs are
/// skipped.
pub fn min_ratio(per_group: &[Vec<Option<f64>>], strict: bool) -> Option<f64> {
    let k = per_group.len();
    if k < 2 {
        return Some(1.0);
    }
    let mut best: Option<f64> = None;
    for c in 0..per_group[0].len() {
        for i in 0..k {
            for j in i + 1..k {
                match (per_group[i][c], per_group[j][c]) {
                    (Some(a), Some(b)) => {
                        let r = ratio(a, b);
                        best = Some(best.map_or(r, |m: f64| m.min(r)));
                    }
                    _ if strict => return None,
                    _ => {}
                }
            }
        }
    }
    best
}

pub fn fairness(def: FairnessDefinition, rows: &Rows, cuts: &[f64], strict: bool) -> Option<f64> {
    let per_group: Vec<_> = rows.iter().zip(cuts).map(|(r, &c)| rates(def, &tally(r, c))).collect();
    min_ratio(&per_group, strict)
}

/// Tier label 0..4 of a score under `[low, average, high]`.
pub fn label(score: f64, cuts: [f64; 3]) -> usize {
    cuts.iter().filter(|&&c| score >= c).count()
}

/// Minimum pairwise ratio of per-bin adverse rates; empty bins are
/// undefined.
pub fn calibration(rows: &Rows, cuts: &[[f64; 3]], bin: usize, strict: bool) -> Option<f64> {
    let per_group: Vec<Vec<Option<f64>>> = rows
        .iter()
        .zip(cuts)
        .map(|(r, &c)| {
            let inside: Vec<bool> = r.iter().filter(|(s, _)| label(*s, c) == bin).map(|(_, o)| *o).collect();
            vec![frac(inside.iter().filter(|&&o| o).count(), inside.len())]
        })
        .collect();
    min_ratio(&per_group, strict)
}

/// Units on different sides of `phi` and `theta`.
pub fn flips(rows: &Rows, phi: f64, thetas: &[f64]) -> usize {
    rows.iter()
        .zip(thetas)
        .map(|(r, &t)| r.iter().filter(|(s, _)| (*s >= phi) != (*s >= t)).count())
        .sum()
}

pub fn tier_flips(rows: &Rows, from: [f64; 3], to: &[[f64; 3]]) -> usize {
    rows.iter()
        .zip(to)
        .map(|(r, &c)| r.iter().filter(|(s, _)| label(*s, from) != label(*s, c)).count())
        .sum()
}

pub fn total(rows: &Rows) -> usize {
    rows.iter().map(Vec::len).sum()
}

/// `(1 - w)(1 - M) + w * Delta` with strict M; infinite when M is undefined
/// and `w < 1`.
pub fn tier_objective(def: FairnessDefinition, rows: &Rows, w: f64, phi: f64, thetas: &[f64]) -> f64 {
    let delta = flips(rows, phi, thetas) as f64 / total(rows) as f64;
    if w == 1.0 {
        return delta;
    }
    match fairness(def, rows, thetas, true) {
        Some(m) => (1.0 - w) * (1.0 - m) + w * delta,
        None => f64::INFINITY,
    }
}

/// Every point that can matter for one group's cut in `[lo, hi]`: both ends,
/// the clamped anchor and each score inside.
pub fn grid(rows: &[(f64, bool)], lo: f64, hi: f64, phi: f64) -> Vec<f64> {
    let mut g = vec![lo, hi, phi.clamp(lo, hi)];
    g.extend(rows.iter().map(|r| r.0).filter(|&s| lo <= s && s <= hi));
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Exhaustive minimum of the tier objective over the product grid, subject
/// to `min <= phi <= max`.
pub fn exhaustive_tier(def: FairnessDefinition, rows: &Rows, w: f64, phi: f64, bounds: &[(f64, f64)]) -> f64 {
    let grids: Vec<Vec<f64>> = rows.iter().zip(bounds).map(|(r, &(lo, hi))| grid(r, lo, hi, phi)).collect();
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; grids.len()];
    loop {
        let thetas: Vec<f64> = idx.iter().zip(&grids).map(|(&i, g)| g[i]).collect();
        let lo = thetas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo <= phi && phi <= hi {
            best = best.min(tier_objective(def, rows, w, phi, &thetas));
        }
        let mut d = 0;
        loop {
            if d == idx.len() {
                return best;
            }
            idx[d] += 1;
            if idx[d] < grids[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Smallest value `x` with at least `p * n` of the values `<= x`.
pub fn percentile_by_counting(values: &[f64], p: f64) -> f64 {
    let n = values.len() as f64;
    let mut candidates = values.to_vec();
    candidates.sort_by(f64::total_cmp);
    *candidates
        .iter()
        .find(|&&x| values.iter().filter(|&&v| v <= x).count() as f64 >= p * n - 1e-9)
        .unwrap()
}

/// Random scored rows; scores are multiples of `1 / resolution` inside
/// `(0, 1)` so ties occur.
pub fn random_rows(seed: u64, sizes: &[usize], resolution: u32) -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let prevalence = rng.random_range(0.2..0.6);
            (0..n)
                .map(|_| {
                    let s = rng.random_range(1..resolution) as f64 / resolution as f64;
                    (s, rng.random_bool(prevalence))
                })
                .collect()
        })
        .collect()
}
