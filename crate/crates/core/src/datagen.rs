//! Synthetic datasets, label corruption, class skew and CSV ingestion.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Labeled instances stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
    pub provenance: String,
}

/// Equality ignores `provenance`.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.n_features == other.n_features
            && self.n_classes == other.n_classes
            && self.labels == other.labels
            && self.features == other.features
    }
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("dataset needs at least one instance"));
        }
        if n_features == 0 || n_classes == 0 {
            return Err(invalid("dataset needs positive feature and class counts"));
        }
        if features.len() != labels.len() * n_features {
            return Err(invalid(format!(
                "{} feature values for {} instances of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Instances at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("index {bad} out of range for {} instances", self.len())));
        }
        let features = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, self.n_features, labels, self.n_classes, self.provenance.clone())
    }

    /// Concatenates two datasets with matching widths and class counts.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_features != other.n_features || self.n_classes != other.n_classes {
            return Err(invalid("cannot concatenate datasets of different shape"));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(features, self.n_features, labels, self.n_classes, self.provenance.clone())
    }

    /// Feature rows at `idx` as a `[idx.len() × n_features]` tensor.
    pub fn feature_tensor<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let data = idx
            .iter()
            .flat_map(|&i| self.row(i).iter().map(|&v| T::lit(v)))
            .collect();
        Tensor::new(vec![idx.len(), self.n_features], data).expect("rows conform")
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Same features with replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(invalid("label count mismatch"));
        }
        Dataset::new(
            self.features.clone(),
            self.n_features,
            labels,
            self.n_classes,
            self.provenance.clone(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    UniformFlip,
    InstanceDependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    /// Largest-to-smallest class frequency.
    pub ratio: f64,
    pub seed: u64,
}

/// Vertices of a regular simplex with pairwise distance `separation`,
/// embedded in the first `n_classes - 1` coordinates of `dim`.
fn simplex_means(n_classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if n_classes > 1 && dim < n_classes - 1 {
        return Err(invalid(format!(
            "{n_classes} equidistant means need at least {} dimensions",
            n_classes - 1
        )));
    }
    if n_classes == 1 {
        return Ok(vec![vec![0.0; dim]]);
    }
    let c = n_classes as f64;
    // Centered basis vectors of R^C, pairwise distance sqrt(2).
    let centered: Vec<Vec<f64>> = (0..n_classes)
        .map(|i| {
            (0..n_classes)
                .map(|j| if i == j { 1.0 - 1.0 / c } else { -1.0 / c })
                .collect()
        })
        .collect();
    // Orthonormal basis of their span via Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in &centered {
        let mut u = v.clone();
        for b in &basis {
            let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
        if basis.len() == n_classes - 1 {
            break;
        }
    }
    let scale = separation / std::f64::consts::SQRT_2;
    Ok(centered
        .iter()
        .map(|v| {
            let mut m = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                m[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            m
        })
        .collect())
}

/// Isotropic unit-variance Gaussian classes with means on a regular simplex.
///
/// Instances are ordered class by class.
pub fn make_gaussian_mixture(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(invalid("gaussian mixture needs positive counts"));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(invalid(format!("separation must be finite and non-negative, got {separation}")));
    }
    let means = simplex_means(n_classes, dim, separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n_per_class * n_classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        features,
        dim,
        labels,
        n_classes,
        format!("gaussian_mixture(n_per_class={n_per_class},classes={n_classes},dim={dim},sep={separation},seed={seed})"),
    )
}

/// Two interleaved half circles; class 0 gets the extra point when `n` is odd.
pub fn make_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("two moons needs at least two points"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(invalid("noise_std must be non-negative"));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let spaced = |k: usize, m: usize| {
        if m == 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (m - 1) as f64
        }
    };
    for k in 0..n_outer {
        let t = spaced(k, n_outer);
        features.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..n_inner {
        let t = spaced(k, n_inner);
        features.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_std > 0.0 {
        for v in &mut features {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_std * z;
        }
    }
    Dataset::new(
        features,
        2,
        labels,
        2,
        format!("two_moons(n={n},noise={noise_std},seed={seed})"),
    )
}

fn class_means(d: &Dataset) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; d.n_features]; d.n_classes];
    let counts = d.class_counts();
    for i in 0..d.len() {
        for (s, &v) in sums[d.labels[i]].iter_mut().zip(d.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Corrupts labels; features and `n_classes` are untouched.
///
/// `UniformFlip` flips exactly `round(rate·n)` labels, chosen without
/// replacement, each to a uniformly drawn different class.
///
/// `InstanceDependent` ranks instances by distance to the nearest
/// other-class empirical mean (closest first) and flips instance `i` with
/// probability `rate · s_i / mean(s)`, `s_i = n − rank_i`, to that nearest
/// other class. The expected flip fraction is `rate`.
pub fn inject_noise(d: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    if !(0.0..=0.5).contains(&spec.rate) {
        return Err(invalid(format!("noise rate {} outside [0, 0.5]", spec.rate)));
    }
    if spec.rate == 0.0 {
        return Ok(d.clone());
    }
    if d.n_classes < 2 {
        return Err(invalid("label noise needs at least two classes"));
    }
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = d.labels.clone();
    match spec.kind {
        NoiseKind::UniformFlip => {
            let k = (spec.rate * n as f64).round() as usize;
            let mut chosen = sample(&mut rng, n, k).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                let r = rng.gen_range(0..d.n_classes - 1);
                labels[i] = if r >= labels[i] { r + 1 } else { r };
            }
        }
        NoiseKind::InstanceDependent => {
            let means = class_means(d);
            let nearest_other: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let y = d.labels[i];
                    means
                        .iter()
                        .enumerate()
                        .filter(|&(c, m)| c != y && m.is_some())
                        .map(|(c, m)| (sq_dist(d.row(i), m.as_ref().unwrap()), c))
                        .fold((f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 { b } else { a })
                })
                .collect();
            if nearest_other.iter().any(|&(_, c)| c == usize::MAX) {
                return Err(invalid("instance-dependent noise needs two populated classes"));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                nearest_other[a]
                    .0
                    .total_cmp(&nearest_other[b].0)
                    .then(a.cmp(&b))
            });
            let mean_score = (n as f64 + 1.0) / 2.0;
            for (rank, &i) in order.iter().enumerate() {
                let p = spec.rate * (n - rank) as f64 / mean_score;
                if rng.gen::<f64>() < p {
                    labels[i] = nearest_other[i].1;
                }
            }
        }
    }
    let mut out = d.with_labels(labels)?;
    out.provenance = format!("{}+noise({:?},{},{})", d.provenance, spec.kind, spec.rate, spec.seed);
    Ok(out)
}

/// Per-class keep fractions `ratio^(−c/(C−1))`: 1 for class 0 down to `1/ratio`.
pub fn skew_profile(n_classes: usize, ratio: f64) -> Vec<f64> {
    if n_classes == 1 {
        return vec![1.0];
    }
    (0..n_classes)
        .map(|c| ratio.powf(-(c as f64) / (n_classes - 1) as f64))
        .collect()
}

/// Subsamples classes along an exponential long-tail profile.
///
/// Class `c` keeps `round(count_c · ratio^(−c/(C−1)))` instances, drawn
/// without replacement and kept in their original order.
pub fn apply_skew(d: &Dataset, spec: &SkewSpec) -> Result<Dataset> {
    if !(spec.ratio.is_finite() && spec.ratio >= 1.0) {
        return Err(invalid(format!("skew ratio must be >= 1, got {}", spec.ratio)));
    }
    let profile = skew_profile(d.n_classes, spec.ratio);
    let counts = d.class_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::new();
    for (c, (&frac, &count)) in profile.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        let target = (count as f64 * frac).round() as usize;
        if target == 0 {
            return Err(invalid(format!(
                "skew ratio {} would empty class {c} ({count} instances)",
                spec.ratio
            )));
        }
        let members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        if target == count {
            keep.extend(members);
        } else {
            keep.extend(sample(&mut rng, count, target).into_iter().map(|k| members[k]));
        }
    }
    keep.sort_unstable();
    let mut out = d.subset(&keep)?;
    out.provenance = format!("{}+skew({},{})", d.provenance, spec.ratio, spec.seed);
    Ok(out)
}

/// Writes `f0,...,fk,label` rows.
pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d.n_features).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(d.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format written by [`save_csv`]. `n_classes` is one past the
/// largest label present.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be f0,...,fk,label".into(),
        });
    }
    for (j, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{j}, found {name:?}"),
            });
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for j in 0..width - 1 {
            let v: f64 = rec[j].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("feature f{j} is not a number: {:?}", &rec[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("feature f{j} is not finite"),
                });
            }
            features.push(v);
        }
        let y: usize = rec[width - 1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label is not a non-negative integer: {:?}", &rec[width - 1]),
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(invalid("no rows"));
    }
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(features, width - 1, labels, n_classes, path.display().to_string())
}
