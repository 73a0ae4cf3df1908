//! Probabilistic margins and the train-twice validation carving.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::diffcore::softmax;
use crate::error::{invalid, Error, Result};
use crate::models::Mlp;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub instance_index: usize,
    /// `p_y − max_{j≠y} p_j`, in [−1, 1].
    pub margin: f64,
}

/// Margin of label `y` under class probabilities `probs`.
pub fn margin_from_probs(probs: &[f64], y: usize) -> f64 {
    let other = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    if other == f64::NEG_INFINITY {
        probs[y]
    } else {
        probs[y] - other
    }
}

const EVAL_CHUNK: usize = 1024;

/// Class probabilities for every instance, computed in chunks.
pub fn predict_probs<T: Scalar>(classifier: &Mlp<T>, d: &Dataset) -> Result<Vec<Vec<f64>>> {
    if classifier.out_dim() != d.n_classes() {
        return Err(invalid(format!(
            "classifier has {} outputs for {} classes",
            classifier.out_dim(),
            d.n_classes()
        )));
    }
    let idx = d.all_indices();
    let mut out = Vec::with_capacity(d.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = classifier.classifier_forward(&d.feature_tensor::<T>(chunk))?;
        for r in 0..chunk.len() {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            out.push(softmax(&row));
        }
    }
    Ok(out)
}

/// One margin record per instance, in dataset order.
pub fn probabilistic_margin<T: Scalar>(classifier: &Mlp<T>, d: &Dataset) -> Result<Vec<MarginRecord>> {
    let probs = predict_probs(classifier, d)?;
    Ok(probs
        .iter()
        .zip(d.labels())
        .enumerate()
        .map(|(i, (p, &y))| MarginRecord {
            instance_index: i,
            margin: margin_from_probs(p, y),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hard,
    Easy,
    Random,
}

/// Disjoint train/validation index sets covering a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// `|val| / n`.
    pub delta_realized: f64,
}

impl SplitAssignment {
    /// Builds a split from sorted-or-not index lists; both sides are sorted.
    pub fn new(mut train: Vec<usize>, mut val: Vec<usize>) -> Result<Self> {
        train.sort_unstable();
        val.sort_unstable();
        let n = train.len() + val.len();
        let all: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
        if all.len() != n || all.iter().next_back().is_some_and(|&m| m + 1 != n) {
            return Err(invalid("split must cover 0..n exactly once"));
        }
        Ok(Self {
            delta_realized: val.len() as f64 / n.max(1) as f64,
            train_indices: train,
            val_indices: val,
        })
    }

    /// `true` entries go to train.
    pub fn from_membership(is_train: &[bool]) -> Self {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, &t) in is_train.iter().enumerate() {
            if t {
                train.push(i)
            } else {
                val.push(i)
            }
        }
        Self {
            delta_realized: val.len() as f64 / is_train.len().max(1) as f64,
            train_indices: train,
            val_indices: val,
        }
    }

    pub fn len(&self) -> usize {
        self.train_indices.len() + self.val_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Membership bitmap, `true` = train.
    pub fn is_train(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &i in &self.train_indices {
            m[i] = true;
        }
        m
    }
}

/// Carves `⌊delta·n⌋` validation instances.
///
/// `Hard` takes the lowest margins, `Easy` the highest, both breaking ties by
/// ascending instance index. `Random` samples uniformly without replacement
/// from the records ordered by instance index, so input order never matters.
pub fn carve_split(
    margins: &[MarginRecord],
    variant: Variant,
    delta: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let n = margins.len();
    let k = (delta * n as f64).floor() as usize;
    if k == 0 {
        return Err(invalid(format!("delta {delta} selects no instance out of {n}")));
    }
    let mut recs = margins.to_vec();
    recs.sort_by_key(|r| r.instance_index);
    let chosen: Vec<usize> = match variant {
        Variant::Hard => {
            recs.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.instance_index.cmp(&b.instance_index)));
            recs[..k].iter().map(|r| r.instance_index).collect()
        }
        Variant::Easy => {
            recs.sort_by(|a, b| b.margin.total_cmp(&a.margin).then(a.instance_index.cmp(&b.instance_index)));
            recs[..k].iter().map(|r| r.instance_index).collect()
        }
        Variant::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, k).into_iter().map(|i| recs[i].instance_index).collect()
        }
    };
    let val: BTreeSet<usize> = chosen.into_iter().collect();
    let train = margins
        .iter()
        .map(|r| r.instance_index)
        .filter(|i| !val.contains(i))
        .collect();
    SplitAssignment::new(train, val.into_iter().collect())
}

/// Keeps every class represented in the training side.
///
/// For each class missing from train, its validation member with the smallest
/// `|margin|` moves to train and, to keep `|val|` fixed, the training instance
/// with the nearest margin among classes that keep at least one other
/// training member moves to validation.
pub fn stratified_guard(
    a: &SplitAssignment,
    d: &Dataset,
    margins: &[MarginRecord],
) -> Result<SplitAssignment> {
    if a.len() != d.len() || margins.len() != d.len() {
        return Err(invalid("split, dataset and margins disagree in length"));
    }
    let counts = d.class_counts();
    if counts.contains(&1) {
        return Err(invalid("stratified guard needs at least two instances per present class"));
    }
    let mut margin_of = vec![0.0; d.len()];
    for r in margins {
        margin_of[r.instance_index] = r.margin;
    }
    let labels = d.labels();
    let mut is_train = a.is_train();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let present = (0..d.len()).any(|i| is_train[i] && labels[i] == class);
        if present {
            continue;
        }
        let back = (0..d.len())
            .filter(|&i| !is_train[i] && labels[i] == class)
            .min_by(|&x, &y| margin_of[x].abs().total_cmp(&margin_of[y].abs()).then(x.cmp(&y)))
            .expect("class has members and none in train");
        let mut train_counts = vec![0usize; d.n_classes()];
        for i in 0..d.len() {
            if is_train[i] {
                train_counts[labels[i]] += 1;
            }
        }
        let out = (0..d.len())
            .filter(|&i| is_train[i] && train_counts[labels[i]] >= 2)
            .min_by(|&x, &y| {
                (margin_of[x] - margin_of[back])
                    .abs()
                    .total_cmp(&(margin_of[y] - margin_of[back]).abs())
                    .then(x.cmp(&y))
            })
            .ok_or_else(|| invalid("no training instance can be exchanged"))?;
        is_train[back] = true;
        is_train[out] = false;
    }
    Ok(SplitAssignment::from_membership(&is_train))
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    instance_index: usize,
    membership: String,
    margin: f64,
}

/// Writes `instance_index,membership,margin` rows in index order.
pub fn write_split_csv(a: &SplitAssignment, margins: &[MarginRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut margin_of = vec![f64::NAN; a.len()];
    for r in margins {
        if r.instance_index < margin_of.len() {
            margin_of[r.instance_index] = r.margin;
        }
    }
    let is_train = a.is_train();
    let mut w = csv::Writer::from_path(path)?;
    for (i, &t) in is_train.iter().enumerate() {
        w.serialize(SplitRow {
            instance_index: i,
            membership: if t { "train" } else { "val" }.into(),
            margin: margin_of[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split_csv(path: impl AsRef<Path>) -> Result<(SplitAssignment, Vec<MarginRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut train, mut val, mut margins) = (Vec::new(), Vec::new(), Vec::new());
    for (k, row) in r.deserialize::<SplitRow>().enumerate() {
        let row = row?;
        match row.membership.as_str() {
            "train" => train.push(row.instance_index),
            "val" => val.push(row.instance_index),
            other => {
                return Err(Error::Parse {
                    line: k + 2,
                    msg: format!("membership must be train or val, got {other:?}"),
                })
            }
        }
        margins.push(MarginRecord {
            instance_index: row.instance_index,
            margin: row.margin,
        });
    }
    Ok((SplitAssignment::new(train, val)?, margins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(m: &[f64]) -> Vec<MarginRecord> {
        m.iter()
            .enumerate()
            .map(|(i, &margin)| MarginRecord { instance_index: i, margin })
            .collect()
    }

    #[test]
    fn margin_examples() {
        assert!((margin_from_probs(&[0.7, 0.2, 0.1], 0) - 0.5).abs() < 1e-15);
        assert!((margin_from_probs(&[0.7, 0.2, 0.1], 1) + 0.5).abs() < 1e-15);
        assert_eq!(margin_from_probs(&[0.25; 4], 2), 0.0);
    }

    #[test]
    fn carve_examples() {
        let m = recs(&[0.9, -0.2, 0.5, 0.1, 0.8]);
        assert_eq!(carve_split(&m, Variant::Hard, 0.4, 0).unwrap().val_indices, vec![1, 3]);
        assert_eq!(carve_split(&m, Variant::Easy, 0.4, 0).unwrap().val_indices, vec![0, 4]);
        let r1 = carve_split(&m, Variant::Random, 0.4, 17).unwrap();
        let r2 = carve_split(&m, Variant::Random, 0.4, 17).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.train_indices.len(), 3);
    }

    #[test]
    fn ties_break_by_index() {
        let m = recs(&[0.3, 0.3, 0.3, 0.3]);
        assert_eq!(carve_split(&m, Variant::Hard, 0.5, 0).unwrap().val_indices, vec![0, 1]);
        assert_eq!(carve_split(&m, Variant::Easy, 0.5, 0).unwrap().val_indices, vec![0, 1]);
    }

    #[test]
    fn delta_out_of_range_rejected() {
        let m = recs(&[0.1, 0.2, 0.3]);
        for delta in [0.0, 1.0, -0.1, 0.2] {
            assert!(carve_split(&m, Variant::Hard, delta, 0).is_err(), "{delta}");
        }
    }

    fn two_class(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        Dataset::new((0..n).map(|i| i as f64).collect(), 1, labels, 2, "t").unwrap()
    }

    #[test]
    fn guard_is_identity_on_balanced_split() {
        let d = two_class(vec![0, 1, 0, 1, 0, 1]);
        let m = recs(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let a = carve_split(&m, Variant::Hard, 0.34, 0).unwrap();
        assert_eq!(stratified_guard(&a, &d, &m).unwrap(), a);
    }

    #[test]
    fn guard_swaps_once() {
        let d = two_class(vec![0, 0, 0, 0, 1, 1]);
        let m = recs(&[0.9, 0.8, 0.7, 0.6, -0.5, -0.1]);
        let a = carve_split(&m, Variant::Hard, 0.34, 0).unwrap();
        assert_eq!(a.val_indices, vec![4, 5]);
        let g = stratified_guard(&a, &d, &m).unwrap();
        assert_eq!(g.val_indices.len(), 2);
        let moved: Vec<_> = a.val_indices.iter().filter(|i| !g.val_indices.contains(i)).collect();
        assert_eq!(moved, vec![&5]);
        assert!(g.val_indices.contains(&3));
    }

    #[test]
    fn guard_rejects_singleton_class() {
        let d = two_class(vec![0, 0, 0, 1]);
        let m = recs(&[0.1, 0.2, 0.3, 0.4]);
        let a = carve_split(&m, Variant::Easy, 0.25, 0).unwrap();
        assert!(stratified_guard(&a, &d, &m).is_err());
    }

    #[test]
    fn split_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.csv");
        let m = recs(&[0.9, -0.2, 0.5, 0.1, 0.8]);
        let a = carve_split(&m, Variant::Hard, 0.4, 0).unwrap();
        write_split_csv(&a, &m, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("instance_index,membership,margin\n0,train,0.9\n1,val,-0.2\n"));
        let (b, m2) = read_split_csv(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, m2);
    }

    proptest! {
        #[test]
        fn carve_invariants(
            margins in prop::collection::vec(-1.0f64..1.0, 4..60),
            delta in 0.05f64..0.5,
            seed in 0u64..100,
            rot in 0usize..60,
        ) {
            let m = recs(&margins);
            let n = m.len();
            let k = (delta * n as f64).floor() as usize;
            prop_assume!(k >= 1);
            let hard = carve_split(&m, Variant::Hard, delta, seed).unwrap();
            let easy = carve_split(&m, Variant::Easy, delta, seed).unwrap();
            let rand = carve_split(&m, Variant::Random, delta, seed).unwrap();
            for s in [&hard, &easy, &rand] {
                prop_assert_eq!(s.val_indices.len(), k);
                prop_assert_eq!(s.len(), n);
            }
            let mean = |idx: &[usize]| idx.iter().map(|&i| margins[i]).sum::<f64>() / idx.len() as f64;
            let full = margins.iter().sum::<f64>() / n as f64;
            prop_assert!(mean(&hard.val_indices) <= full + 1e-12);
            prop_assert!(full <= mean(&easy.val_indices) + 1e-12);

            let mut distinct = margins.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if delta <= 0.5 && distinct.len() == n {
                prop_assert!(hard.val_indices.iter().all(|i| !easy.val_indices.contains(i)));
            }

            let mut permuted = m.clone();
            permuted.rotate_left(rot % n);
            for v in [Variant::Hard, Variant::Easy, Variant::Random] {
                prop_assert_eq!(
                    carve_split(&permuted, v, delta, seed).unwrap(),
                    carve_split(&m, v, delta, seed).unwrap()
                );
            }
        }

        #[test]
        fn guard_keeps_every_class_in_train(
            labels in prop::collection::vec(0usize..3, 6..40),
            margins_seed in prop::collection::vec(-1.0f64..1.0, 40),
            delta in 0.1f64..0.6,
        ) {
            let n = labels.len();
            let mut counts = [0usize; 3];
            labels.iter().for_each(|&y| counts[y] += 1);
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= 2));
            let d = Dataset::new(vec![0.0; n], 1, labels.clone(), 3, "t").unwrap();
            let m = recs(&margins_seed[..n]);
            prop_assume!((delta * n as f64).floor() >= 1.0);
            let a = carve_split(&m, Variant::Hard, delta, 0).unwrap();
            if let Ok(g) = stratified_guard(&a, &d, &m) {
                prop_assert_eq!(g.val_indices.len(), a.val_indices.len());
                for (c, &count) in counts.iter().enumerate() {
                    if count > 0 {
                        prop_assert!(g.train_indices.iter().any(|&i| labels[i] == c));
                    }
                }
            }
        }
    }
}
