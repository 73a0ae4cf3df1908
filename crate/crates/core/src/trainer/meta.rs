//! Weighted inner steps and the one-step-lookahead meta-gradient.
//!
//! The lookahead copy is `θ̂ = θ − β₃·(1/m)·Σ w_i(φ)·∇_θ ℓ_i(θ)` and the
//! meta objective is the unweighted validation loss at `θ̂`. By the chain rule
//!
//! ```text
//! ∂L_val/∂w_i = −(β₃/m) · ∇_θ ℓ_i(θ) · ∇_θ̂ L_val(θ̂)
//! ```
//!
//! For a dense layer with input `a` and pre-activation gradient `δ`, the
//! per-instance gradient is the outer product `a_iᵀ δ_i`, so its inner product
//! with the validation gradient `(V, v_b)` is `Σ_k δ_ik (a_i V + v_b)_k`. Every
//! per-instance dot product therefore comes out of one batched backward pass
//! and one extra matmul per layer. The gradient with respect to `φ` is then
//! `∇_φ Σ_i s_i·w_i(φ)` with `s_i` held constant.

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Dropout, MetaNet, Mlp, ParamSet};
use crate::scalar::Scalar;

/// Features and labels of a minibatch together with their dataset indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn gather(d: &crate::datagen::Dataset, idx: &[usize]) -> Self {
        Self {
            x: d.feature_tensor(idx),
            y: d.labels_at(idx),
            indices: idx.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// One SGD step on `(1/m)·Σ w_i ℓ_i`; returns the weighted loss before the step.
pub fn weighted_step<T: Scalar>(
    classifier: &mut Mlp<T>,
    batch: &Batch<T>,
    weights: &[T],
    lr: T,
    momentum: T,
    dropout: Option<Dropout<'_>>,
) -> Result<T> {
    if weights.len() != batch.len() {
        return Err(crate::error::invalid("one weight per batch instance required"));
    }
    let tape = Tape::new();
    let bound = classifier.params.bind(&tape, true);
    let out = classifier.trace(&bound, tape.constant(batch.x.clone()), dropout)?.out;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let loss = out.cross_entropy_rows(&batch.y)?.mul(w)?.mean();
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::Diverged { step: 0, what: "weighted training loss".into() });
    }
    let grads = bound.flat_grads(&tape.backward(loss)?);
    classifier.params.sgd_step(&grads, lr, momentum)?;
    Ok(value)
}

/// Weighted step with weights from the meta-network, detached from `φ`.
pub fn lrw_inner_step<T: Scalar>(
    classifier: &mut Mlp<T>,
    meta: &MetaNet<T>,
    meta_input: &Tensor<T>,
    batch: &Batch<T>,
    lr: T,
    momentum: T,
    dropout: Option<Dropout<'_>>,
) -> Result<T> {
    let w = meta.meta_weights(meta_input)?;
    weighted_step(classifier, batch, &w, lr, momentum, dropout)
}

/// Result of [`meta_gradient`].
#[derive(Clone, Debug)]
pub struct MetaGradient<T> {
    /// `∂L_val(θ̂)/∂φ` in [`ParamSet`] order.
    pub grad: Vec<T>,
    /// `∂L_val(θ̂)/∂w_i` for each training instance.
    pub weight_sensitivity: Vec<T>,
    /// `L_val(θ̂)`.
    pub val_loss: T,
}

/// Mean validation cross-entropy of `params` and its flat gradient.
fn val_loss_and_grad<T: Scalar>(
    classifier: &Mlp<T>,
    params: &ParamSet<T>,
    val: &Batch<T>,
) -> Result<(T, Vec<T>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let out = classifier.trace(&bound, tape.constant(val.x.clone()), None)?.out;
    let loss = out.cross_entropy(&val.y)?;
    let g = tape.backward(loss)?;
    Ok((loss.value().item(), bound.flat_grads(&g)))
}

/// Gradient of the post-lookahead validation loss with respect to `φ`.
///
/// `meta_input` holds one row per training-batch instance.
pub fn meta_gradient<T: Scalar>(
    classifier: &Mlp<T>,
    meta: &MetaNet<T>,
    meta_input: &Tensor<T>,
    train: &Batch<T>,
    val: &Batch<T>,
    beta3: T,
) -> Result<MetaGradient<T>> {
    let m = train.len();
    if meta_input.rows() != m {
        return Err(crate::error::invalid("meta input rows must match the training batch"));
    }
    let w = meta.meta_weights(meta_input)?;
    let m_t = T::from_count(m);

    // Per-instance pieces: layer inputs a_l and pre-activation gradients δ_l.
    let tape = Tape::new();
    let bound = classifier.params.bind(&tape, true);
    let tr = classifier.trace(&bound, tape.constant(train.x.clone()), None)?;
    let g = tape.backward(tr.out.cross_entropy_rows(&train.y)?.sum())?;
    let acts: Vec<Tensor<T>> = tr.inputs.iter().map(|a| (*a.value()).clone()).collect();
    let deltas: Vec<Tensor<T>> = tr.pre.iter().map(|z| g.wrt(z)).collect();

    let mut lookahead = classifier.params.clone();
    for (l, (a, d)) in acts.iter().zip(&deltas).enumerate() {
        let out = d.cols();
        let mut wd = d.clone();
        for (r, row) in wd.data_mut().chunks_mut(out).enumerate() {
            row.iter_mut().for_each(|v| *v *= w[r]);
        }
        let gw = a.transpose()?.matmul(&wd)?;
        let step = beta3 / m_t;
        for (p, &gv) in lookahead.weight_mut(l).iter_mut().zip(gw.data()) {
            *p -= step * gv;
        }
        for (k, p) in lookahead.bias_mut(l).iter_mut().enumerate() {
            let col: T = (0..m).map(|r| wd.at(r, k)).sum();
            *p -= step * col;
        }
    }

    let (val_loss, v) = val_loss_and_grad(classifier, &lookahead, val)?;
    if !val_loss.is_finite() {
        return Err(Error::Diverged { step: 0, what: "lookahead validation loss".into() });
    }
    let view = ParamSet::from_values(classifier.params.widths(), v)?;

    let mut dots = vec![T::zero(); m];
    for (l, (a, d)) in acts.iter().zip(&deltas).enumerate() {
        let (i, o) = (a.cols(), d.cols());
        let vw = Tensor::new(vec![i, o], view.weight(l).to_vec())?;
        let p = a.matmul(&vw)?;
        let vb = view.bias(l);
        for (r, dot) in dots.iter_mut().enumerate() {
            *dot += d
                .row(r)
                .iter()
                .zip(p.row(r))
                .zip(vb)
                .map(|((&dk, &pk), &bk)| dk * (pk + bk))
                .sum::<T>();
        }
    }
    let s: Vec<T> = dots.iter().map(|&dv| -(beta3 / m_t) * dv).collect();

    let tape = Tape::new();
    let bound = meta.mlp.params.bind(&tape, true);
    let wv = meta.weights_on_tape(&bound, tape.constant(meta_input.clone()))?;
    let obj = wv.mul(tape.constant(Tensor::vector(s.clone())))?.sum();
    let grad = bound.flat_grads(&tape.backward(obj)?);
    Ok(MetaGradient { grad, weight_sensitivity: s, val_loss })
}
