//! The classifier, the instance-weight meta-network and the splitter.
//!
//! All three are plain MLPs over a [`ParamSet`]; they differ in their inputs
//! and output heads.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Gradients, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    UniformGlorot,
    Zeros,
}

/// Flat parameter vector with a per-layer view.
///
/// Layer `l` maps `widths[l]` inputs to `widths[l+1]` outputs and owns a
/// row-major `[in × out]` weight block followed by an `out` bias block.
/// Momentum velocity lives alongside the values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    widths: Vec<usize>,
    values: Vec<T>,
    velocity: Vec<T>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("layer widths must be >= 2 positive entries, got {widths:?}")));
        }
        let n = param_count(widths);
        Ok(Self {
            widths: widths.to_vec(),
            values: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        })
    }

    /// Deterministic initialisation; Glorot-uniform weights, zero biases.
    pub fn init(widths: &[usize], seed: u64, scheme: InitScheme) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        if scheme == InitScheme::Zeros {
            return Ok(p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..p.n_layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weight_mut(l) {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn from_values(widths: &[usize], values: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        if values.len() != p.values.len() {
            return Err(invalid(format!(
                "{} values for layout {widths:?} needing {}",
                values.len(),
                p.values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = T::zero());
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offset(l);
        start..start + self.widths[l] * self.widths[l + 1]
    }

    fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.weight_range(l).end;
        start..start + self.widths[l + 1]
    }

    pub fn weight(&self, l: usize) -> &[T] {
        &self.values[self.weight_range(l)]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [T] {
        let r = self.weight_range(l);
        &mut self.values[r]
    }

    pub fn bias(&self, l: usize) -> &[T] {
        &self.values[self.bias_range(l)]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [T] {
        let r = self.bias_range(l);
        &mut self.values[r]
    }

    /// Human-readable name of flat entry `i`, e.g. `layer1.weight[4]`.
    pub fn param_name(&self, i: usize) -> String {
        for l in 0..self.n_layers() {
            let w = self.weight_range(l);
            if w.contains(&i) {
                return format!("layer{l}.weight[{}]", i - w.start);
            }
            let b = self.bias_range(l);
            if b.contains(&i) {
                return format!("layer{l}.bias[{}]", i - b.start);
            }
        }
        format!("param[{i}]")
    }

    /// Places the layers on `tape`; `trainable` decides whether they collect gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let leaf = |t: Tensor<T>| if trainable { tape.param(t) } else { tape.constant(t) };
        let layers = (0..self.n_layers())
            .map(|l| {
                let (i, o) = (self.widths[l], self.widths[l + 1]);
                let w = Tensor::new(vec![i, o], self.weight(l).to_vec()).expect("layout");
                let b = Tensor::new(vec![o], self.bias(l).to_vec()).expect("layout");
                (leaf(w), leaf(b))
            })
            .collect();
        Bound { layers }
    }

    /// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
    pub fn sgd_step(&mut self, grads: &[T], lr: T, momentum: T) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(invalid(format!(
                "gradient of length {} for {} parameters",
                grads.len(),
                self.values.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(self.param_name(i)));
        }
        for ((p, v), &g) in self.values.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'t, T> {
    pub layers: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<T: Scalar> Bound<'_, T> {
    /// Flattens per-layer gradients into [`ParamSet`] order.
    pub fn flat_grads(&self, g: &Gradients<T>) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| {
                let mut v = g.wrt(w).into_data();
                v.extend(g.wrt(b).into_data());
                v
            })
            .collect()
    }
}

/// Intermediate values of one MLP forward pass.
pub struct Trace<'t, T> {
    /// Input to each layer (post-activation, post-dropout of the previous one).
    pub inputs: Vec<Var<'t, T>>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Var<'t, T>>,
    pub out: Var<'t, T>,
}

/// Inverted-dropout configuration for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Multi-layer perceptron; hidden layers use `activation`, the output is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub params: ParamSet<T>,
    pub activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(widths: &[usize], activation: Activation, seed: u64, scheme: InitScheme) -> Result<Self> {
        Ok(Self {
            params: ParamSet::init(widths, seed, scheme)?,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.params.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.params.widths.last().unwrap()
    }

    /// Forward pass over bound parameters.
    pub fn trace<'t>(
        &self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Trace<'t, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: shape,
                rhs: vec![self.in_dim()],
            });
        }
        let tape = x.tape();
        let last = bound.layers.len() - 1;
        let mut inputs = Vec::with_capacity(bound.layers.len());
        let mut pre = Vec::with_capacity(bound.layers.len());
        let mut h = x;
        for (l, &(w, b)) in bound.layers.iter().enumerate() {
            inputs.push(h);
            let z = h.matmul(w)?.add(b)?;
            pre.push(z);
            if l == last {
                h = z;
                break;
            }
            h = match self.activation {
                Activation::Relu => z.relu(),
                Activation::Tanh => z.tanh(),
            };
            if let Some(d) = dropout.as_mut().filter(|d| d.rate > 0.0) {
                let keep = 1.0 - d.rate;
                let n = h.value().numel();
                let mask = (0..n)
                    .map(|_| if d.rng.gen::<f64>() < keep { T::lit(1.0 / keep) } else { T::zero() })
                    .collect();
                h = h.mul(tape.constant(Tensor::new(h.shape(), mask)?))?;
            }
        }
        Ok(Trace { inputs, pre, out: h })
    }

    /// Evaluation-mode forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.trace(&bound, tape.constant(x.clone()), None)?.out;
        let v = (*out.value()).clone();
        Ok(v)
    }

    /// Activations entering the output layer.
    pub fn hidden(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let tr = self.trace(&bound, tape.constant(x.clone()), None)?;
        let v = (*tr.inputs.last().unwrap().value()).clone();
        Ok(v)
    }

    /// Logits `[batch × n_classes]`.
    pub fn classifier_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward(x)?;
        if !logits.all_finite() {
            return Err(invalid("classifier produced non-finite logits"));
        }
        Ok(logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            activation: self.activation,
            widths: self.params.widths.clone(),
            values: self.params.values.iter().map(|v| v.as_f64()).collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&ck)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let values = ck.values.into_iter().map(T::lit).collect();
        Ok(Self {
            params: ParamSet::from_values(&ck.widths, values)?,
            activation: ck.activation,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "lrw-params";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter dump: layer widths plus flat values in [`ParamSet`] order.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    activation: Activation,
    widths: Vec<usize>,
    values: Vec<f64>,
}

/// Largest logit magnitude whose sigmoid stays strictly inside (0, 1) for `T`.
pub fn logit_bound<T: Scalar>() -> T {
    (T::one() / T::epsilon()).ln() - T::lit(2.0)
}

/// Clamps a head logit into [`logit_bound`].
pub fn squash<T: Scalar>(z: T) -> T {
    let b = logit_bound::<T>();
    z.max(-b).min(b)
}

/// `w_i = r_i / mean(r)`.
///
/// The mean is taken as `r_0 + mean(r − r_0)` so equal inputs give weights of
/// exactly 1 and scaling `r` by a power of two leaves the result bit-identical.
pub fn normalize_weights<T: Scalar>(raw: &[T]) -> Vec<T> {
    let r0 = raw[0];
    let dev: T = raw.iter().map(|&r| r - r0).sum();
    let mean = r0 + dev / T::from_count(raw.len());
    raw.iter().map(|&r| r / mean).collect()
}

/// Taped form of [`normalize_weights`] for a `[batch]` vector.
pub fn normalize_weights_var<'t, T: Scalar>(raw: Var<'t, T>) -> Result<Var<'t, T>> {
    let r0 = raw.index_select(&[0])?;
    let mean = r0.add(raw.sub(r0)?.mean())?;
    raw.div(mean)
}

/// Instance-weight network `g_φ`: MLP with a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet<T> {
    pub mlp: Mlp<T>,
}

impl<T: Scalar> MetaNet<T> {
    pub fn new(in_dim: usize, hidden: &[usize], activation: Activation, seed: u64, scheme: InitScheme) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(in_dim).chain(hidden.iter().copied()).chain([1]).collect();
        Ok(Self { mlp: Mlp::new(&widths, activation, seed, scheme)? })
    }

    /// Sigmoid outputs in (0, 1) before renormalisation.
    pub fn raw_weights(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.mlp.forward(input)?.data().iter().map(|&z| sigmoid(squash(z))).collect())
    }

    /// Batch weights rescaled to mean 1.
    pub fn meta_weights(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        Ok(normalize_weights(&self.raw_weights(input)?))
    }

    /// Normalised weights as a differentiable function of bound parameters.
    pub fn weights_on_tape<'t>(&self, bound: &Bound<'t, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = input.shape()[0];
        let b = logit_bound::<T>();
        let raw = self.mlp.trace(bound, input, None)?.out.reshape(&[n])?.clamp(-b, b).sigmoid();
        normalize_weights_var(raw)
    }
}

/// Splitter `g_Θ(x, y)`: probability that an instance belongs to the
/// pseudotrain side.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitterNet<T> {
    pub mlp: Mlp<T>,
    pub n_classes: usize,
}

/// Appends a one-hot label block to each row of `x`.
pub fn with_one_hot<T: Scalar>(x: &Tensor<T>, labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    if x.rows() != labels.len() {
        return Err(invalid("feature rows and labels disagree"));
    }
    let width = x.cols() + n_classes;
    let mut data = Vec::with_capacity(labels.len() * width);
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, classes: n_classes });
        }
        data.extend_from_slice(x.row(r));
        data.extend((0..n_classes).map(|c| if c == y { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![labels.len(), width], data)
}

impl<T: Scalar> SplitterNet<T> {
    pub fn new(
        feature_dim: usize,
        n_classes: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(feature_dim + n_classes)
            .chain(hidden.iter().copied())
            .chain([1])
            .collect();
        Ok(Self { mlp: Mlp::new(&widths, activation, seed, scheme)?, n_classes })
    }

    /// Pre-sigmoid scores, clamped so the probabilities stay inside (0, 1).
    pub fn logits(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let input = with_one_hot(x, labels, self.n_classes)?;
        Ok(self.mlp.forward(&input)?.into_data().into_iter().map(squash).collect())
    }

    /// `p(z = 1 | x, y)`; `z = 1` is pseudotrain membership.
    pub fn split_probability(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        Ok(self.logits(x, labels)?.into_iter().map(sigmoid).collect())
    }

    /// Logits `[batch]` as a differentiable function of bound parameters.
    pub fn logits_on_tape<'t>(
        &self,
        bound: &Bound<'t, T>,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Var<'t, T>> {
        let tape = bound.layers[0].0.tape();
        let input = tape.constant(with_one_hot(x, labels, self.n_classes)?);
        let b = logit_bound::<T>();
        Ok(self
            .mlp
            .trace(bound, input, None)?
            .out
            .reshape(&[labels.len()])?
            .clamp(-b, b))
    }
}
