//! Accuracy, paired margin deltas, margin-bucket gains and variant ordering.
//!
//! Bins are half-open `[lo, hi)`. Bin edges are exact multiples `k / q` of the
//! bin width `1/q`, so a value such as `0.2` always lands in `[0.2, 0.4)`.
//! Values outside the covered range are counted in the nearest end bin.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Result};
use crate::hardness::{margin_from_probs, predict_probs, MarginRecord};
use crate::models::Mlp;
use crate::scalar::Scalar;

/// Accuracy and per-instance margins on `test`. An instance counts as correct
/// only when its label's probability strictly exceeds every other class.
pub fn evaluate<T: Scalar>(classifier: &Mlp<T>, test: &Dataset) -> Result<(f64, Vec<MarginRecord>)> {
    let probs = predict_probs(classifier, test)?;
    let mut correct = 0usize;
    let mut margins = Vec::with_capacity(test.len());
    for (i, (p, &y)) in probs.iter().zip(test.labels()).enumerate() {
        if p.iter().enumerate().all(|(k, &v)| k == y || v < p[y]) {
            correct += 1;
        }
        margins.push(MarginRecord { instance_index: i, margin: margin_from_probs(p, y) });
    }
    Ok((correct as f64 / test.len().max(1) as f64, margins))
}

/// Fixed-width histogram with bins `[lo + j/q, lo + (j+1)/q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Lower edge of every bin, plus the upper edge of the last.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of width `1/per_unit` covering `[lo, hi)`, with integer `lo`, `hi`.
    pub fn new(lo: i64, hi: i64, per_unit: u32) -> Result<Self> {
        if hi <= lo || per_unit == 0 {
            return Err(invalid("histogram needs lo < hi and a positive resolution"));
        }
        let q = per_unit as i64;
        let edges: Vec<f64> = (lo * q..=hi * q).map(|k| k as f64 / q as f64).collect();
        Ok(Self { counts: vec![0; edges.len() - 1], edges })
    }

    /// Bin of `v`, clamped into the covered range.
    pub fn bin_of(&self, v: f64) -> usize {
        let last = self.counts.len() - 1;
        // partition_point gives the number of edges <= v.
        let above = self.edges.partition_point(|&e| e <= v);
        above.saturating_sub(1).min(last)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lo", "hi", "count"])?;
        for (j, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[j].to_string(), self.edges[j + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Standard error of the mean; `None` below two samples.
pub fn sem(v: &[f64]) -> Option<f64> {
    let n = v.len();
    if n < 2 {
        return None;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

/// Per-instance `a − b` margin differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub histogram: Histogram,
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

fn check_paired(a: &[MarginRecord], b: &[MarginRecord]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("paired margins differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("no margins to compare"));
    }
    if let Some(i) = a.iter().zip(b).position(|(x, y)| x.instance_index != y.instance_index) {
        return Err(invalid(format!("paired margins disagree on instance order at position {i}")));
    }
    Ok(())
}

/// Histogram (width 0.2 over [−2, 2)) and summary of `a − b`.
pub fn paired_margin_delta(a: &[MarginRecord], b: &[MarginRecord]) -> Result<PairedDelta> {
    check_paired(a, b)?;
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.margin - y.margin).collect();
    let mut histogram = Histogram::new(-2, 2, 5)?;
    deltas.iter().for_each(|&d| histogram.add(d));
    Ok(PairedDelta { histogram, mean: mean(&deltas), median: median(&deltas), n: deltas.len() })
}

/// Mean gain over ERM inside one ERM-margin bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketGain {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
    pub sem: Option<f64>,
}

/// `target − erm` margin gains grouped by ERM margin in buckets of width 0.2 over [−1, 1).
pub fn margin_gain_by_bucket(target: &[MarginRecord], erm: &[MarginRecord]) -> Result<Vec<BucketGain>> {
    check_paired(target, erm)?;
    let grid = Histogram::new(-1, 1, 5)?;
    let mut gains: Vec<Vec<f64>> = vec![Vec::new(); grid.counts.len()];
    for (t, e) in target.iter().zip(erm) {
        gains[grid.bin_of(e.margin)].push(t.margin - e.margin);
    }
    Ok(gains
        .iter()
        .enumerate()
        .map(|(j, g)| BucketGain {
            lo: grid.edges[j],
            hi: grid.edges[j + 1],
            count: g.len(),
            mean: (!g.is_empty()).then(|| mean(g)),
            sem: sem(g),
        })
        .collect())
}

pub fn write_buckets_csv(buckets: &[BucketGain], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lo", "hi", "count", "mean", "sem"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in buckets {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), opt(b.mean), opt(b.sem)])?;
    }
    w.flush()?;
    Ok(())
}

/// Which trained model a result belongs to. The declaration order is the
/// canonical presentation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Erm,
    LrwEasy,
    LrwRandom,
    LrwHard,
    Lrwopt,
}

impl ModelTag {
    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Erm => "erm",
            ModelTag::LrwEasy => "lrw_easy",
            ModelTag::LrwRandom => "lrw_random",
            ModelTag::LrwHard => "lrw_hard",
            ModelTag::Lrwopt => "lrwopt",
        }
    }
}

/// Accuracy of one model per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantAccuracies {
    pub tag: ModelTag,
    /// `(seed, accuracy)` pairs.
    pub runs: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub tag: ModelTag,
    pub mean: f64,
    pub sem: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// `mean(easy) < mean(random) < mean(hard)`.
    Holds,
    /// Some adjacent pair has equal means.
    Tie,
    Fails,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub verdict: Verdict,
    pub summaries: Vec<VariantSummary>,
    /// Seeds on which hard beats random, and random beats easy.
    pub hard_over_random_wins: usize,
    pub random_over_easy_wins: usize,
    pub n_seeds: usize,
}

/// Checks `Easy < Random < Hard` on matched seeds.
pub fn ordering_check(results: &[VariantAccuracies]) -> Result<OrderingReport> {
    let mut by_tag: BTreeMap<ModelTag, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        if by_tag.insert(r.tag, r.runs.iter().copied().collect()).is_some() {
            return Err(invalid(format!("variant {} listed twice", r.tag.name())));
        }
    }
    let get = |t: ModelTag| by_tag.get(&t).ok_or_else(|| invalid(format!("missing variant {}", t.name())));
    let (easy, random, hard) = (get(ModelTag::LrwEasy)?, get(ModelTag::LrwRandom)?, get(ModelTag::LrwHard)?);
    let seeds: Vec<u64> = easy.keys().copied().collect();
    for (tag, m) in &by_tag {
        if m.keys().copied().collect::<Vec<_>>() != seeds {
            return Err(invalid(format!("variant {} has a different seed set", tag.name())));
        }
    }
    if seeds.len() < 2 {
        return Err(invalid("ordering check needs at least two seeds"));
    }
    let summaries: Vec<VariantSummary> = by_tag
        .iter()
        .map(|(&tag, m)| {
            let v: Vec<f64> = m.values().copied().collect();
            VariantSummary { tag, mean: mean(&v), sem: sem(&v), n: v.len() }
        })
        .collect();
    let m = |t: ModelTag| summaries.iter().find(|s| s.tag == t).expect("present").mean;
    let (me, mr, mh) = (m(ModelTag::LrwEasy), m(ModelTag::LrwRandom), m(ModelTag::LrwHard));
    let verdict = if me < mr && mr < mh {
        Verdict::Holds
    } else if me == mr || mr == mh {
        Verdict::Tie
    } else {
        Verdict::Fails
    };
    let wins = |a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>| seeds.iter().filter(|s| a[s] > b[s]).count();
    Ok(OrderingReport {
        verdict,
        summaries,
        hard_over_random_wins: wins(hard, random),
        random_over_easy_wins: wins(random, easy),
        n_seeds: seeds.len(),
    })
}

/// Evaluation summary of one model, or an aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: ModelTag,
    pub test_accuracy: f64,
    pub mean_margin: f64,
    pub n_test: usize,
    /// Against the ERM reference, when one exists.
    pub paired_margin_deltas: Option<Histogram>,
    pub delta_mean: Option<f64>,
    pub delta_median: Option<f64>,
    pub seeds_aggregated: usize,
}

impl MetricsReport {
    pub fn new(tag: ModelTag, accuracy: f64, margins: &[MarginRecord], reference: Option<&[MarginRecord]>) -> Result<Self> {
        let m: Vec<f64> = margins.iter().map(|r| r.margin).collect();
        let paired = reference.map(|r| paired_margin_delta(margins, r)).transpose()?;
        Ok(Self {
            model_tag: tag,
            test_accuracy: accuracy,
            mean_margin: mean(&m),
            n_test: margins.len(),
            delta_mean: paired.as_ref().map(|p| p.mean),
            delta_median: paired.as_ref().map(|p| p.median),
            paired_margin_deltas: paired.map(|p| p.histogram),
            seeds_aggregated: 1,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
