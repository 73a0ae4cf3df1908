//! ERM, fixed-split LRW and the one-shot LRWOpt training loops.
//!
//! All three loops share one engine. An epoch runs `⌈|train| / batch_train⌉`
//! classifier steps on batches drawn uniformly with replacement from the
//! training side. Every `Q` classifier steps (counted globally) an outer step
//! runs first: the splitter descends its objective on a batch pooled from the
//! whole dataset, then the meta-network descends the lookahead validation
//! loss.
//!
//! Each consumer of randomness owns its own ChaCha stream, so switching the
//! meta-network or splitter on or off never perturbs the classifier's batch
//! sequence. With frozen uniform weights LRW therefore replays ERM step for
//! step.

pub mod meta;
pub mod split;

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::diffcore::{Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::hardness::{carve_split, MarginRecord, SplitAssignment, Variant};
use crate::models::{with_one_hot, Activation, Dropout, InitScheme, MetaNet, Mlp, SplitterNet};
use crate::scalar::Scalar;

pub use meta::{lrw_inner_step, meta_gradient, weighted_step, Batch, MetaGradient};
pub use split::{
    bce_from_logits, generate_split, loss_and_correctness, split_probabilities, splitter_gradient, splitter_loss,
    splitter_regularizers, SplitterTerms,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    #[default]
    Off,
    /// Stop once `mean val loss − mean train loss` drops below its previous value.
    Gap,
}

/// What the meta-network (and, via `share_backbone`, the splitter) sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaInput {
    #[default]
    Features,
    FeaturesAndLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub delta: f64,
    #[serde(rename = "Q", alias = "q")]
    pub q: usize,
    pub lr_splitter: f64,
    pub lr_meta: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub reg_ratio_weight: f64,
    pub reg_label_weight: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    /// Pooled batch size for splitter updates.
    pub batch_split: usize,
    /// Total epochs, warm start included.
    pub max_epochs: usize,
    pub warm_start_epochs: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub classifier_hidden: Vec<usize>,
    pub meta_hidden: Vec<usize>,
    pub splitter_hidden: Vec<usize>,
    pub activation: Activation,
    pub meta_input: MetaInput,
    pub meta_init: InitScheme,
    /// Feed the classifier's penultimate activations to the meta-network and splitter.
    pub share_backbone: bool,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            q: 5,
            lr_splitter: 0.01,
            lr_meta: 0.01,
            lr_classifier: 0.05,
            momentum: 0.9,
            reg_ratio_weight: 1.0,
            reg_label_weight: 1.0,
            batch_train: 64,
            batch_val: 64,
            batch_split: 256,
            max_epochs: 30,
            warm_start_epochs: 5,
            early_stop: EarlyStop::Off,
            seed: 0,
            classifier_hidden: vec![32],
            meta_hidden: vec![16],
            splitter_hidden: vec![16],
            activation: Activation::Relu,
            meta_input: MetaInput::Features,
            meta_init: InitScheme::UniformGlorot,
            share_backbone: false,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.q == 0 {
            return Err(invalid("Q must be at least 1"));
        }
        for (name, lr) in [
            ("lr_splitter", self.lr_splitter),
            ("lr_meta", self.lr_meta),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.reg_ratio_weight < 0.0 || self.reg_label_weight < 0.0 {
            return Err(invalid("regularizer weights must be non-negative"));
        }
        if self.batch_train == 0 || self.batch_val == 0 || self.batch_split == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max_epochs must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Independent seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.next_u64()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_CLASSIFIER_INIT: u64 = 1;
const STREAM_META_INIT: u64 = 2;
const STREAM_SPLITTER_INIT: u64 = 3;
const STREAM_TRAIN_BATCHES: u64 = 4;
const STREAM_VAL_BATCHES: u64 = 5;
const STREAM_DROPOUT: u64 = 6;
const STREAM_WARM_SPLIT: u64 = 7;
const STREAM_LOOKAHEAD_BATCHES: u64 = 8;
const STREAM_POOLED_BATCHES: u64 = 9;

/// Random streams owned by a trainer.
#[derive(Clone, Debug)]
pub struct Streams {
    pub train: ChaCha8Rng,
    pub val: ChaCha8Rng,
    pub lookahead: ChaCha8Rng,
    pub pooled: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            train: stream(seed, STREAM_TRAIN_BATCHES),
            val: stream(seed, STREAM_VAL_BATCHES),
            lookahead: stream(seed, STREAM_LOOKAHEAD_BATCHES),
            pooled: stream(seed, STREAM_POOLED_BATCHES),
            dropout: stream(seed, STREAM_DROPOUT),
        }
    }
}

/// Cycles through a shuffled validation set, reshuffling at the end of each pass.
#[derive(Clone, Debug, Default)]
struct ValCursor {
    order: Vec<usize>,
    pos: usize,
}

impl ValCursor {
    fn new(val: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut order = val.to_vec();
        shuffle(&mut order, rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                shuffle(&mut self.order, rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

fn sample_with_replacement(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Per-epoch training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub phase: String,
    /// Mean weighted minibatch loss over the epoch's classifier steps.
    pub weighted_train_loss: f64,
    /// Unweighted mean loss over the training side at epoch end.
    pub train_loss: f64,
    /// Unweighted mean loss over the validation side at epoch end (0 without one).
    pub val_loss: f64,
    pub split_loss: f64,
    pub omega_ratio: f64,
    pub omega_label: f64,
    pub val_fraction: f64,
}

impl LossBreakdown {
    fn all_finite(&self) -> bool {
        [
            self.weighted_train_loss,
            self.train_loss,
            self.val_loss,
            self.split_loss,
            self.omega_ratio,
            self.omega_label,
            self.val_fraction,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn write_log_csv(log: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a training loop mutates.
#[derive(Clone, Debug)]
pub struct TrainerState<T> {
    pub classifier: Mlp<T>,
    pub meta: Option<MetaNet<T>>,
    pub splitter: Option<SplitterNet<T>>,
    pub epoch: usize,
    /// Classifier steps taken so far.
    pub step: usize,
    /// Last recorded generalization gap.
    pub ge: f64,
    pub rng: Streams,
    /// Weighted loss of every classifier step.
    pub step_losses: Vec<f64>,
    val_cursor: ValCursor,
}

/// Which nets take part in an outer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outer {
    None,
    SplitterOnly,
    MetaOnly,
    Both,
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(d: &Dataset, cfg: &TrainConfig, with_meta: bool, with_splitter: bool) -> Result<Self> {
        cfg.validate()?;
        if d.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let widths: Vec<usize> = std::iter::once(d.n_features())
            .chain(cfg.classifier_hidden.iter().copied())
            .chain([d.n_classes()])
            .collect();
        let classifier = Mlp::new(
            &widths,
            cfg.activation,
            derive_seed(cfg.seed, STREAM_CLASSIFIER_INIT),
            InitScheme::UniformGlorot,
        )?;
        let base = if cfg.share_backbone { widths[widths.len() - 2] } else { d.n_features() };
        let meta_in = base + if cfg.meta_input == MetaInput::FeaturesAndLabel { d.n_classes() } else { 0 };
        let meta = with_meta
            .then(|| {
                MetaNet::new(
                    meta_in,
                    &cfg.meta_hidden,
                    cfg.activation,
                    derive_seed(cfg.seed, STREAM_META_INIT),
                    cfg.meta_init,
                )
            })
            .transpose()?;
        let splitter = with_splitter
            .then(|| -> Result<SplitterNet<T>> {
                let mut s = SplitterNet::new(
                    base,
                    d.n_classes(),
                    &cfg.splitter_hidden,
                    cfg.activation,
                    derive_seed(cfg.seed, STREAM_SPLITTER_INIT),
                    InitScheme::UniformGlorot,
                )?;
                calibrate_splitter(&mut s, cfg, d, cfg.share_backbone.then_some(&classifier))?;
                Ok(s)
            })
            .transpose()?;
        Ok(Self {
            classifier,
            meta,
            splitter,
            epoch: 0,
            step: 0,
            ge: 0.0,
            rng: Streams::new(cfg.seed),
            step_losses: Vec::new(),
            val_cursor: ValCursor::default(),
        })
    }

    /// Input rows for the meta-network/splitter backbone: raw features or the
    /// classifier's penultimate activations.
    pub fn feature_view(&self, cfg: &TrainConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
        if cfg.share_backbone {
            self.classifier.hidden(x)
        } else {
            Ok(x.clone())
        }
    }

    pub fn meta_input(&self, cfg: &TrainConfig, batch: &Batch<T>, n_classes: usize) -> Result<Tensor<T>> {
        let base = self.feature_view(cfg, &batch.x)?;
        match cfg.meta_input {
            MetaInput::Features => Ok(base),
            MetaInput::FeaturesAndLabel => with_one_hot(&base, &batch.y, n_classes),
        }
    }

    /// Pseudotrain probabilities of every instance in `d`.
    pub fn split_probabilities(&self, cfg: &TrainConfig, d: &Dataset) -> Result<Vec<f64>> {
        let s = self.splitter.as_ref().ok_or_else(|| invalid("no splitter"))?;
        let x = d.feature_tensor::<T>(&d.all_indices());
        split_probabilities(s, &self.feature_view(cfg, &x)?, d)
    }

    fn inner_step(&mut self, cfg: &TrainConfig, d: &Dataset, split: &SplitAssignment, is_train: &[bool], weighted: bool) -> Result<f64> {
        let idx = sample_with_replacement(&split.train_indices, cfg.batch_train, &mut self.rng.train);
        if let Some(&bad) = idx.iter().find(|&&i| !is_train[i]) {
            return Err(invalid(format!("validation instance {bad} drawn into a training batch")));
        }
        let batch = Batch::gather(d, &idx);
        let weights = match (&self.meta, weighted) {
            (Some(meta), true) => meta.meta_weights(&self.meta_input(cfg, &batch, d.n_classes())?)?,
            _ => vec![T::one(); batch.len()],
        };
        let dropout = (cfg.dropout > 0.0).then_some(Dropout { rate: cfg.dropout, rng: &mut self.rng.dropout });
        let step = self.step;
        let loss = weighted_step(
            &mut self.classifier,
            &batch,
            &weights,
            T::lit(cfg.lr_classifier),
            T::lit(cfg.momentum),
            dropout,
        )
        .map_err(|e| at_step(e, step))?;
        self.step += 1;
        self.step_losses.push(loss.as_f64());
        Ok(loss.as_f64())
    }

    fn outer_step_inner(&mut self, cfg: &TrainConfig, d: &Dataset, split: &SplitAssignment, which: Outer) -> Result<Option<SplitterTerms>> {
        let step = self.step;
        let mut terms = None;
        if matches!(which, Outer::SplitterOnly | Outer::Both) {
            let idx = sample_with_replacement(&d.all_indices(), cfg.batch_split, &mut self.rng.pooled);
            let batch = Batch::gather(d, &idx);
            let input = self.feature_view(cfg, &batch.x)?;
            let splitter = self.splitter.as_ref().ok_or_else(|| invalid("no splitter"))?;
            let (g, t) = splitter_gradient(
                splitter,
                &input,
                &self.classifier,
                &batch,
                cfg.delta,
                cfg.reg_ratio_weight,
                cfg.reg_label_weight,
                true,
            )
            .map_err(|e| at_step(e, step))?;
            let splitter = self.splitter.as_mut().expect("checked");
            splitter
                .mlp
                .params
                .sgd_step(&g, T::lit(cfg.lr_splitter), T::lit(cfg.momentum))
                .map_err(|e| at_step(e, step))?;
            terms = Some(t);
        }
        if matches!(which, Outer::MetaOnly | Outer::Both) {
            let val_idx = self.val_cursor.next(cfg.batch_val, &mut self.rng.val);
            let tr_idx = sample_with_replacement(&split.train_indices, cfg.batch_train, &mut self.rng.lookahead);
            let val = Batch::gather(d, &val_idx);
            let tr = Batch::gather(d, &tr_idx);
            let input = self.meta_input(cfg, &tr, d.n_classes())?;
            let meta = self.meta.as_ref().ok_or_else(|| invalid("no meta-network"))?;
            let mg = meta_gradient(&self.classifier, meta, &input, &tr, &val, T::lit(cfg.lr_classifier))
                .map_err(|e| at_step(e, step))?;
            let meta = self.meta.as_mut().expect("checked");
            meta.mlp
                .params
                .sgd_step(&mg.grad, T::lit(cfg.lr_meta), T::lit(cfg.momentum))
                .map_err(|e| at_step(e, step))?;
        }
        Ok(terms)
    }

    /// One outer update against the current `split`: splitter first (when
    /// present), then the meta-network (when present).
    pub fn outer_step(&mut self, cfg: &TrainConfig, d: &Dataset, split: &SplitAssignment) -> Result<Option<SplitterTerms>> {
        if self.val_cursor.order.is_empty() {
            self.val_cursor = ValCursor::new(&split.val_indices, &mut self.rng.val);
        }
        let which = match (self.splitter.is_some(), self.meta.is_some()) {
            (true, true) => Outer::Both,
            (true, false) => Outer::SplitterOnly,
            (false, true) => Outer::MetaOnly,
            (false, false) => Outer::None,
        };
        self.outer_step_inner(cfg, d, split, which)
    }

    /// Installs `split` for subsequent epochs, restarting the validation cycle if it changed.
    fn set_split(&mut self, split: &SplitAssignment, previous: Option<&SplitAssignment>) {
        if previous.is_none_or(|p| p.val_indices != split.val_indices) {
            self.val_cursor = ValCursor::new(&split.val_indices, &mut self.rng.val);
        }
    }

    fn run_epoch(&mut self, cfg: &TrainConfig, d: &Dataset, split: &SplitAssignment, phase: &str, outer: Outer) -> Result<LossBreakdown> {
        if split.train_indices.is_empty() {
            return Err(invalid("training side of the split is empty"));
        }
        let is_train = split.is_train();
        let steps = split.train_indices.len().div_ceil(cfg.batch_train);
        let (mut wsum, mut terms_sum, mut n_terms) = (0.0, SplitterTerms::default(), 0usize);
        for _ in 0..steps {
            if outer != Outer::None && self.step.is_multiple_of(cfg.q) {
                if let Some(t) = self.outer_step_inner(cfg, d, split, outer)? {
                    terms_sum.split_loss += t.split_loss;
                    terms_sum.omega_ratio += t.omega_ratio;
                    terms_sum.omega_label += t.omega_label;
                    n_terms += 1;
                }
            }
            let weighted = matches!(outer, Outer::MetaOnly | Outer::Both);
            wsum += self.inner_step(cfg, d, split, &is_train, weighted)?;
        }
        let nt = n_terms.max(1) as f64;
        let row = LossBreakdown {
            epoch: self.epoch,
            phase: phase.into(),
            weighted_train_loss: wsum / steps as f64,
            train_loss: mean_loss(&self.classifier, d, &split.train_indices)?,
            val_loss: if split.val_indices.is_empty() { 0.0 } else { mean_loss(&self.classifier, d, &split.val_indices)? },
            split_loss: terms_sum.split_loss / nt,
            omega_ratio: terms_sum.omega_ratio / nt,
            omega_label: terms_sum.omega_label / nt,
            val_fraction: split.delta_realized,
        };
        if !row.all_finite() || !self.classifier.params.all_finite() {
            return Err(Error::Diverged { step: self.step, what: format!("epoch {} losses", self.epoch) });
        }
        self.epoch += 1;
        Ok(row)
    }
}

/// Sets the splitter's output layer so that exactly `⌊δ·n⌋` instances of `d`
/// start on the validation side (up to ties in the initial scores) and the
/// mean soft validation probability starts at or below `1.1·δ`.
fn calibrate_splitter<T: Scalar>(s: &mut SplitterNet<T>, cfg: &TrainConfig, d: &Dataset, backbone: Option<&Mlp<T>>) -> Result<()> {
    let k = (cfg.delta * d.len() as f64).floor() as usize;
    let last = s.mlp.params.n_layers() - 1;
    s.mlp.params.bias_mut(last)[0] = T::zero();
    if k == 0 || k >= d.len() {
        return Ok(());
    }
    let x = d.feature_tensor::<T>(&d.all_indices());
    let input = match backbone {
        Some(c) => c.hidden(&x)?,
        None => x,
    };
    let mut z: Vec<f64> = s.logits(&input, d.labels())?.into_iter().map(|v| v.as_f64()).collect();
    z.sort_by(f64::total_cmp);
    let mid = 0.5 * (z[k - 1] + z[k]);
    // Steepen the output layer until the soft validation mass is also near δ.
    let soft = |scale: f64| z.iter().map(|&zi| crate::diffcore::sigmoid(scale * (mid - zi))).sum::<f64>() / z.len() as f64;
    let target = 1.1 * cfg.delta;
    let mut scale = 1.0;
    if soft(1.0) > target && z[k] > z[k - 1] {
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        while soft(hi) > target && hi < 1e6 {
            hi *= 2.0;
        }
        for _ in 0..50 {
            let m = (lo * hi).sqrt();
            if soft(m) > target {
                lo = m;
            } else {
                hi = m;
            }
        }
        scale = hi;
    }
    for w in s.mlp.params.weight_mut(last) {
        *w *= T::lit(scale);
    }
    s.mlp.params.bias_mut(last)[0] = T::lit(-scale * mid);
    Ok(())
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { what, .. } => Error::Diverged { step, what },
        Error::NonFiniteGradient(name) => Error::Diverged { step, what: format!("non-finite gradient at {name}") },
        other => other,
    }
}

/// Unweighted mean cross-entropy of `classifier` over `idx`.
pub fn mean_loss<T: Scalar>(classifier: &Mlp<T>, d: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let logits = classifier.classifier_forward(&d.feature_tensor::<T>(chunk))?;
        let tape = Tape::new();
        let ce = tape.constant(logits).cross_entropy_rows(&d.labels_at(chunk))?;
        total += ce.value().data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(total / idx.len() as f64)
}

/// Renormalised learned weights of the instances `idx`, as one batch.
pub fn learned_weights<T: Scalar>(state: &TrainerState<T>, cfg: &TrainConfig, d: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    let meta = state.meta.as_ref().ok_or_else(|| invalid("no meta-network"))?;
    let batch = Batch::gather(d, idx);
    Ok(meta
        .meta_weights(&state.meta_input(cfg, &batch, d.n_classes())?)?
        .into_iter()
        .map(|w| w.as_f64())
        .collect())
}

#[derive(Clone, Debug)]
pub struct ErmOutcome<T> {
    pub state: TrainerState<T>,
    pub log: Vec<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct LrwOutcome<T> {
    pub state: TrainerState<T>,
    pub log: Vec<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct LrwOptOutcome<T> {
    pub state: TrainerState<T>,
    pub log: Vec<LossBreakdown>,
    pub split: SplitAssignment,
}

/// Unweighted minibatch SGD over the whole dataset.
pub fn train_erm<T: Scalar>(d: &Dataset, cfg: &TrainConfig) -> Result<ErmOutcome<T>> {
    let mut state = TrainerState::new(d, cfg, false, false)?;
    let split = SplitAssignment::from_membership(&vec![true; d.len()]);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for _ in 0..cfg.max_epochs {
        log.push(state.run_epoch(cfg, d, &split, "erm", Outer::None)?);
    }
    Ok(ErmOutcome { state, log })
}

/// Bilevel LRW on a fixed split.
pub fn train_lrw<T: Scalar>(d: &Dataset, split: &SplitAssignment, cfg: &TrainConfig) -> Result<LrwOutcome<T>> {
    if split.len() != d.len() {
        return Err(invalid(format!("split covers {} instances, dataset has {}", split.len(), d.len())));
    }
    if split.train_indices.is_empty() || split.val_indices.is_empty() {
        return Err(invalid("both sides of the split must be nonempty"));
    }
    let mut state = TrainerState::new(d, cfg, true, false)?;
    state.set_split(split, None);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for _ in 0..cfg.max_epochs {
        log.push(state.run_epoch(cfg, d, split, "lrw", Outer::MetaOnly)?);
    }
    Ok(LrwOutcome { state, log })
}

/// Random split used during the LRWOpt warm start.
pub fn warm_start_split(n: usize, delta: f64, seed: u64) -> Result<SplitAssignment> {
    let zeros: Vec<MarginRecord> = (0..n).map(|i| MarginRecord { instance_index: i, margin: 0.0 }).collect();
    carve_split(&zeros, Variant::Random, delta, derive_seed(seed, STREAM_WARM_SPLIT))
}

/// One-shot LRWOpt: warm start on a random split, then jointly learn the
/// split, the instance weights and the classifier.
pub fn train_lrwopt<T: Scalar>(d: &Dataset, cfg: &TrainConfig) -> Result<LrwOptOutcome<T>> {
    if (cfg.delta * d.len() as f64).floor() < 1.0 {
        return Err(invalid(format!("delta {} selects no instance out of {}", cfg.delta, d.len())));
    }
    if cfg.warm_start_epochs >= cfg.max_epochs {
        return Err(invalid("warm_start_epochs must be smaller than max_epochs"));
    }
    let mut state = TrainerState::new(d, cfg, true, true)?;
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let warm = warm_start_split(d.len(), cfg.delta, cfg.seed)?;
    for _ in 0..cfg.warm_start_epochs {
        log.push(state.run_epoch(cfg, d, &warm, "warm_start", Outer::SplitterOnly)?);
    }
    let mut previous: Option<SplitAssignment> = None;
    for _ in cfg.warm_start_epochs..cfg.max_epochs {
        let split = generate_split(&state.split_probabilities(cfg, d)?)?;
        state.set_split(&split, previous.as_ref());
        let row = state.run_epoch(cfg, d, &split, "lrwopt", Outer::Both)?;
        let gap = row.val_loss - row.train_loss;
        log.push(row);
        previous = Some(split);
        if cfg.early_stop == EarlyStop::Gap {
            if gap < state.ge {
                break;
            }
            state.ge = gap;
        }
    }
    let split = generate_split(&state.split_probabilities(cfg, d)?)?;
    Ok(LrwOptOutcome { state, log, split })
}
