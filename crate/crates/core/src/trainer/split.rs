//! Splitter objective: correctness cross-entropy, soft validation loss and
//! the ratio/label-balance regularizers.

use crate::datagen::Dataset;
use crate::diffcore::{sigmoid, softplus, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::hardness::SplitAssignment;
use crate::models::{Mlp, SplitterNet};
use crate::scalar::Scalar;

use super::meta::Batch;

/// Per-instance cross-entropy and 0/1 correctness (argmax, ties to the lower class).
pub fn loss_and_correctness<T: Scalar>(classifier: &Mlp<T>, batch: &Batch<T>) -> Result<(Vec<T>, Vec<bool>)> {
    let logits = classifier.classifier_forward(&batch.x)?;
    let tape = Tape::new();
    let ce = tape.constant(logits.clone()).cross_entropy_rows(&batch.y)?;
    let losses = ce.value().data().to_vec();
    let correct = (0..batch.len())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == batch.y[r]
        })
        .collect();
    Ok((losses, correct))
}

/// Mean binary cross-entropy between `p(train)` and classifier correctness.
pub fn splitter_loss<T: Scalar>(
    splitter: &SplitterNet<T>,
    split_input: &Tensor<T>,
    classifier: &Mlp<T>,
    batch: &Batch<T>,
) -> Result<T> {
    let z = splitter.logits(split_input, &batch.y)?;
    let (_, correct) = loss_and_correctness(classifier, batch)?;
    Ok(bce_from_logits(&z, &correct))
}

/// `mean(softplus(z) − t·z)`, the cross-entropy of `σ(z)` against `t`.
pub fn bce_from_logits<T: Scalar>(z: &[T], target: &[bool]) -> T {
    let s: T = z
        .iter()
        .zip(target)
        .map(|(&zi, &t)| softplus(zi) - if t { zi } else { T::zero() })
        .sum();
    s / T::from_count(z.len())
}

fn kl_bernoulli(r: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(r, q) + term(1.0 - r, 1.0 - q)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() }).sum()
}

/// `(Ω₁, Ω₂)` for soft pseudotrain probabilities `probs`.
///
/// `Ω₁ = KL(Bern(r) ‖ Bern(δ))` with `r` the mean validation membership
/// `1 − p`. `Ω₂ = Σ_k KL(P(y | z = k) ‖ P(y))` where the conditionals use the
/// soft memberships as instance weights.
pub fn splitter_regularizers(probs: &[f64], labels: &[usize], n_classes: usize, delta: f64) -> Result<(f64, f64)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(invalid("probabilities and labels must be nonempty and aligned"));
    }
    if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(invalid("split probabilities must lie in (0, 1)"));
    }
    let n = probs.len() as f64;
    let r = probs.iter().map(|p| 1.0 - p).sum::<f64>() / n;
    let omega_ratio = kl_bernoulli(r, delta);

    let mut prior = vec![0.0; n_classes];
    let mut tr = vec![0.0; n_classes];
    let mut va = vec![0.0; n_classes];
    for (&p, &y) in probs.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, classes: n_classes });
        }
        prior[y] += 1.0 / n;
        tr[y] += p;
        va[y] += 1.0 - p;
    }
    let (st, sv): (f64, f64) = (tr.iter().sum(), va.iter().sum());
    tr.iter_mut().for_each(|v| *v /= st);
    va.iter_mut().for_each(|v| *v /= sv);
    Ok((omega_ratio, kl(&tr, &prior) + kl(&va, &prior)))
}

/// Values of the splitter objective's terms on one pooled batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitterTerms {
    pub split_loss: f64,
    pub val_loss: f64,
    pub omega_ratio: f64,
    pub omega_label: f64,
}

/// Taped `Σ_c P_c (ln P_c − ln Q_c)` for a `[1 × C]` distribution `p` and fixed `q`.
fn kl_var<'t, T: Scalar>(p: Var<'t, T>, q: &[f64]) -> Result<Var<'t, T>> {
    let tape = p.tape();
    let tiny = T::min_positive_value();
    let log_q = tape.constant(Tensor::new(vec![1, q.len()], q.iter().map(|v| T::lit(v.ln())).collect())?);
    p.mul(p.clamp(tiny, T::one()).log().sub(log_q)?)
}

/// Gradient of `L_split − L_val + w₁Ω₁ + w₂Ω₂` with respect to the splitter.
///
/// `L_val` is the validation-set loss sum with soft memberships, scaled by the
/// batch size: `Σ(1 − p_i)ℓ_i / m` over the pooled batch. The classifier losses
/// and correctness targets are constants.
#[allow(clippy::too_many_arguments)]
pub fn splitter_gradient<T: Scalar>(
    splitter: &SplitterNet<T>,
    split_input: &Tensor<T>,
    classifier: &Mlp<T>,
    batch: &Batch<T>,
    delta: f64,
    reg_ratio_weight: f64,
    reg_label_weight: f64,
    include_val_term: bool,
) -> Result<(Vec<T>, SplitterTerms)> {
    let m = batch.len();
    let c = splitter.n_classes;
    let (losses, correct) = loss_and_correctness(classifier, batch)?;
    let tape = Tape::new();
    let bound = splitter.mlp.params.bind(&tape, true);
    let z = splitter.logits_on_tape(&bound, split_input, &batch.y)?;
    let p = z.sigmoid();
    let q = p.neg().add_scalar(T::one());

    let t = tape.constant(Tensor::vector(correct.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()));
    let split_loss = z.softplus().sub(z.mul(t)?)?.mean();

    let l = tape.constant(Tensor::vector(losses));
    let val_loss = q.mul(l)?.mean();

    let r = q.mean();
    let (dl, dr) = (T::lit(delta), T::lit(1.0 - delta));
    let omega_ratio = r
        .mul(r.scale(dl.recip()).log())?
        .add(r.neg().add_scalar(T::one()).mul(r.neg().add_scalar(T::one()).scale(dr.recip()).log())?)?;

    let mut prior = vec![0.0; c];
    for &y in &batch.y {
        prior[y] += 1.0 / m as f64;
    }
    let present: Vec<usize> = (0..c).filter(|&k| prior[k] > 0.0).collect();
    let mut onehot = vec![T::zero(); m * present.len()];
    for (i, &y) in batch.y.iter().enumerate() {
        let col = present.iter().position(|&k| k == y).expect("present");
        onehot[i * present.len() + col] = T::one();
    }
    let onehot = tape.constant(Tensor::new(vec![m, present.len()], onehot)?);
    let q_prior: Vec<f64> = present.iter().map(|&k| prior[k]).collect();
    fn cond<'t, T: Scalar>(mass: Var<'t, T>, onehot: Var<'t, T>, prior: &[f64]) -> Result<Var<'t, T>> {
        let m = mass.shape()[0];
        let joint = mass.reshape(&[1, m])?.matmul(onehot)?;
        kl_var(joint.div(mass.sum())?, prior).map(|v| v.sum())
    }
    let omega_label = cond(p, onehot, &q_prior)?.add(cond(q, onehot, &q_prior)?)?;

    let mut obj = split_loss
        .add(omega_ratio.scale(T::lit(reg_ratio_weight)))?
        .add(omega_label.scale(T::lit(reg_label_weight)))?;
    if include_val_term {
        obj = obj.sub(val_loss)?;
    }
    let terms = SplitterTerms {
        split_loss: split_loss.value().item().as_f64(),
        val_loss: val_loss.value().item().as_f64(),
        omega_ratio: omega_ratio.value().item().as_f64(),
        omega_label: omega_label.value().item().as_f64(),
    };
    if !obj.value().item().is_finite() {
        return Err(Error::Diverged { step: 0, what: "splitter objective".into() });
    }
    Ok((bound.flat_grads(&tape.backward(obj)?), terms))
}

/// Hard split: pseudotrain where `p ≥ 0.5`, validation where `p < 0.5`.
pub fn generate_split(probs: &[f64]) -> Result<SplitAssignment> {
    let is_train: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
    let n_train = is_train.iter().filter(|&&t| t).count();
    if n_train == 0 || n_train == probs.len() {
        return Err(Error::DegenerateSplit(format!(
            "splitter assigned all {} instances to the {} side",
            probs.len(),
            if n_train == 0 { "validation" } else { "training" }
        )));
    }
    Ok(SplitAssignment::from_membership(&is_train))
}

/// Pseudotrain probabilities for every instance of `d`, given splitter inputs.
pub fn split_probabilities<T: Scalar>(splitter: &SplitterNet<T>, input: &Tensor<T>, d: &Dataset) -> Result<Vec<f64>> {
    Ok(splitter
        .logits(input, d.labels())?
        .into_iter()
        .map(|z| sigmoid(z).as_f64())
        .collect())
}
