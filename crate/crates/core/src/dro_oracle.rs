//! Exhaustive evaluation of the tri-level, dual-DRO and DRO objectives on
//! small finite instances with 0/1 loss.
//!
//! All losses are integer counts of misclassified points, so every
//! comparison is exact. Hypotheses are indexed in listing order and points in
//! input order; subsets of size `k = ⌊δ·n⌋` are enumerated as bitmasks in
//! ascending numeric order, and the first maximizer in that order is reported.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest instance the enumerations accept.
pub const MAX_POINTS: usize = 14;
/// Hypotheses are tracked in a 64-bit set.
pub const MAX_HYPOTHESES: usize = 64;
/// Upper bound on weight vectors enumerated per distinct training multiset.
pub const MAX_WEIGHTINGS: u64 = 20_000_000;

/// Points `(x, y)` with a small discrete `x`, and hypotheses given as truth
/// tables `x ↦ class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteInstance {
    pub delta: f64,
    pub points: Vec<(usize, usize)>,
    pub hypotheses: Vec<Vec<usize>>,
}

impl FiniteInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 || n > MAX_POINTS {
            return Err(Error::Budget(format!("instance has {n} points, allowed 1..={MAX_POINTS}")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.subset_size() == 0 {
            return Err(invalid(format!("delta {} selects no point out of {n}", self.delta)));
        }
        if self.hypotheses.is_empty() || self.hypotheses.len() > MAX_HYPOTHESES {
            return Err(Error::Budget(format!(
                "{} hypotheses, allowed 1..={MAX_HYPOTHESES}",
                self.hypotheses.len()
            )));
        }
        let max_x = self.points.iter().map(|p| p.0).max().unwrap_or(0);
        if let Some(h) = self.hypotheses.iter().position(|t| t.len() <= max_x) {
            return Err(invalid(format!("hypothesis {h} has no entry for x = {max_x}")));
        }
        Ok(())
    }

    pub fn subset_size(&self) -> usize {
        (self.delta * self.points.len() as f64).floor() as usize
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let inst: Self = toml::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    /// Bitmask over points for each hypothesis: bit `i` set iff it errs on point `i`.
    fn error_masks(&self) -> Vec<u32> {
        self.hypotheses
            .iter()
            .map(|t| {
                self.points
                    .iter()
                    .enumerate()
                    .filter(|(_, &(x, y))| t[x] != y)
                    .fold(0u32, |m, (i, _)| m | (1 << i))
            })
            .collect()
    }

    /// Bitmask over hypotheses for each point: bit `h` set iff hypothesis `h` errs on it.
    fn point_columns(&self) -> Vec<u64> {
        self.points
            .iter()
            .map(|&(x, y)| {
                self.hypotheses
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t[x] != y)
                    .fold(0u64, |m, (h, _)| m | (1 << h))
            })
            .collect()
    }
}

/// All `k`-subsets of `n` points as bitmasks, ascending.
fn subsets(n: usize, k: usize) -> Vec<u32> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut s: u32 = (1 << k) - 1;
    let limit: u32 = 1 << n;
    while s < limit {
        out.push(s);
        let c = s & s.wrapping_neg();
        let r = s + c;
        s = (((r ^ s) >> 2) / c) | r;
    }
    out
}

fn indices(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask >> i & 1 == 1).collect()
}

/// One row of the per-subset table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubsetRow {
    pub subset: Vec<usize>,
    /// `min_h` loss of hypothesis `h` on the subset.
    pub min_loss: u32,
    /// First listed hypothesis attaining `min_loss`.
    pub argmin_hypothesis: usize,
    /// Tri-level value of the subset, when computed.
    pub trilevel_loss: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub subset_size: usize,
    pub dual_dro_value: u32,
    pub trilevel_value: Option<u32>,
    pub argmax_subset: Vec<usize>,
    pub per_subset_min_losses: Vec<SubsetRow>,
}

/// `max_{|S| = k} min_h Σ_{i∈S} ℓ(h, i)`.
pub fn dual_dro_exhaustive(inst: &FiniteInstance) -> Result<OracleResult> {
    inst.validate()?;
    let masks = inst.error_masks();
    let k = inst.subset_size();
    let mut rows = Vec::new();
    let (mut best, mut best_subset) = (0u32, 0u32);
    for (j, s) in subsets(inst.points.len(), k).into_iter().enumerate() {
        let (argmin, min_loss) = masks
            .iter()
            .map(|m| (m & s).count_ones())
            .enumerate()
            .min_by_key(|&(h, l)| (l, h))
            .expect("nonempty hypothesis list");
        if j == 0 || min_loss > best {
            best = min_loss;
            best_subset = s;
        }
        rows.push(SubsetRow {
            subset: indices(s),
            min_loss,
            argmin_hypothesis: argmin,
            trilevel_loss: None,
        });
    }
    Ok(OracleResult {
        subset_size: k,
        dual_dro_value: best,
        trilevel_value: None,
        argmax_subset: indices(best_subset),
        per_subset_min_losses: rows,
    })
}

/// `min_h max_{|S| = k} Σ_{i∈S} ℓ(h, i)`.
pub fn dro_exhaustive(inst: &FiniteInstance) -> Result<u32> {
    inst.validate()?;
    let masks = inst.error_masks();
    let all = subsets(inst.points.len(), inst.subset_size());
    Ok(masks
        .iter()
        .map(|m| all.iter().map(|s| (m & s).count_ones()).max().unwrap_or(0))
        .min()
        .expect("nonempty hypothesis list"))
}

/// How the inner level chooses among hypotheses with equal weighted training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// The first listed minimizer.
    #[default]
    FirstListed,
    /// The minimizer with the smallest validation loss (the optimistic
    /// bilevel convention), then the first listed.
    ValidationOptimal,
}

/// Distinct sums of `c` values drawn with repetition from `grid`.
fn multiset_sums(grid: &[u32], c: usize) -> Vec<u32> {
    let mut sums: BTreeSet<u32> = [0].into();
    for _ in 0..c {
        sums = sums.iter().flat_map(|&s| grid.iter().map(move |&w| s + w)).collect();
    }
    sums.into_iter().collect()
}

/// Every set of tied weighted-loss minimizers reachable by some grid weighting
/// of a training multiset, the multiset given as `(hypothesis error column, count)`.
fn reachable_argmin_sets(groups: &[(u64, usize)], grid: &[u32], n_hyp: usize) -> Result<Vec<u64>> {
    let options: Vec<Vec<u32>> = groups.iter().map(|&(_, c)| multiset_sums(grid, c)).collect();
    let total: u64 = options.iter().map(|o| o.len() as u64).product();
    if total > MAX_WEIGHTINGS {
        return Err(Error::Budget(format!("{total} weightings exceed the limit {MAX_WEIGHTINGS}")));
    }
    let mut found = BTreeSet::new();
    let mut pick = vec![0usize; groups.len()];
    let mut loss = vec![0u64; n_hyp];
    loop {
        loss.iter_mut().for_each(|l| *l = 0);
        for (g, &(col, _)) in groups.iter().enumerate() {
            let w = options[g][pick[g]] as u64;
            if w == 0 {
                continue;
            }
            for (h, l) in loss.iter_mut().enumerate() {
                if col >> h & 1 == 1 {
                    *l += w;
                }
            }
        }
        let min = *loss.iter().min().expect("nonempty");
        let set = loss.iter().enumerate().filter(|(_, &l)| l == min).fold(0u64, |m, (h, _)| m | (1 << h));
        found.insert(set);
        // Odometer increment.
        let mut g = 0;
        loop {
            if g == groups.len() {
                return Ok(found.into_iter().collect());
            }
            pick[g] += 1;
            if pick[g] < options[g].len() {
                break;
            }
            pick[g] = 0;
            g += 1;
        }
    }
}

fn check_grid(grid: &[u32]) -> Result<Vec<u32>> {
    if grid.is_empty() {
        return Err(invalid("weight grid is empty"));
    }
    let g: BTreeSet<u32> = grid.iter().copied().collect();
    Ok(g.into_iter().collect())
}

/// `max_S min_φ ℓ_val(θ*(φ), S)` with `φ` ranging over per-point grid weights
/// on the complement of `S` and `θ*` the weighted-loss minimizer chosen by `tie`.
pub fn trilevel_exhaustive(inst: &FiniteInstance, weight_grid: &[u32], tie: TieBreak) -> Result<OracleResult> {
    let mut res = dual_dro_exhaustive(inst)?;
    let grid = check_grid(weight_grid)?;
    let masks = inst.error_masks();
    let cols = inst.point_columns();
    let n = inst.points.len();
    let n_hyp = inst.hypotheses.len();
    let mut cache: HashMap<Vec<(u64, usize)>, Vec<u64>> = HashMap::new();
    let mut best: Option<(u32, u32)> = None;
    for (row, s) in res.per_subset_min_losses.iter_mut().zip(subsets(n, inst.subset_size())) {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for i in (0..n).filter(|i| s >> i & 1 == 0) {
            *counts.entry(cols[i]).or_default() += 1;
        }
        let mut key: Vec<(u64, usize)> = counts.into_iter().collect();
        key.sort_unstable();
        if !cache.contains_key(&key) {
            let sets = reachable_argmin_sets(&key, &grid, n_hyp)?;
            cache.insert(key.clone(), sets);
        }
        let val_loss = |h: usize| (masks[h] & s).count_ones();
        let value = cache[&key]
            .iter()
            .map(|&set| match tie {
                TieBreak::FirstListed => val_loss(set.trailing_zeros() as usize),
                TieBreak::ValidationOptimal => {
                    (0..n_hyp).filter(|h| set >> h & 1 == 1).map(val_loss).min().expect("nonempty")
                }
            })
            .min()
            .expect("at least one weighting");
        row.trilevel_loss = Some(value);
        if best.is_none_or(|(b, _)| value > b) {
            best = Some((value, s));
        }
    }
    let (value, s) = best.expect("at least one subset");
    res.trilevel_value = Some(value);
    res.argmax_subset = indices(s);
    Ok(res)
}

/// Writes `subset,min_loss,argmin_hypothesis,trilevel_loss` rows; subsets are
/// space-separated point indices and a missing tri-level value is empty.
pub fn write_oracle_csv(res: &OracleResult, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subset", "min_loss", "argmin_hypothesis", "trilevel_loss"])?;
    for r in &res.per_subset_min_losses {
        let subset = r.subset.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        w.write_record([
            subset,
            r.min_loss.to_string(),
            r.argmin_hypothesis.to_string(),
            r.trilevel_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Random instance: `x` uniform on `0..n_x`, labels uniform on `0..n_classes`,
/// hypotheses drawn as distinct uniform truth tables.
pub fn random_instance(
    seed: u64,
    n_points: usize,
    n_x: usize,
    n_classes: usize,
    n_hypotheses: usize,
    delta: f64,
) -> Result<FiniteInstance> {
    let space = (n_classes as f64).powi(n_x as i32);
    if (n_hypotheses as f64) > space {
        return Err(invalid(format!("only {space} distinct truth tables exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n_points).map(|_| (rng.gen_range(0..n_x), rng.gen_range(0..n_classes))).collect();
    let mut seen = BTreeSet::new();
    let mut hypotheses = Vec::with_capacity(n_hypotheses);
    while hypotheses.len() < n_hypotheses {
        let t: Vec<usize> = (0..n_x).map(|_| rng.gen_range(0..n_classes)).collect();
        if seen.insert(t.clone()) {
            hypotheses.push(t);
        }
    }
    let inst = FiniteInstance { delta, points, hypotheses };
    inst.validate()?;
    Ok(inst)
}
