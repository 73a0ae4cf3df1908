//! Experiment specs, the per-seed protocol and on-disk artifacts.
//!
//! Layout under `outdir`:
//!
//! ```text
//! <variant>/<seed>/config.toml      spec echo with the single seed
//! <variant>/<seed>/train_log.csv    LossBreakdown per epoch
//! <variant>/<seed>/classifier.json  (+ meta.json, splitter.json)
//! <variant>/<seed>/split.csv        lrw_* and lrwopt
//! <variant>/<seed>/margins.csv      test margins next to the ERM reference
//! <variant>/<seed>/report.json
//! <variant>/aggregate.json
//! ```
//!
//! Every file is a pure function of the spec and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{apply_skew, inject_noise, load_csv, make_gaussian_mixture, make_two_moons, Dataset, NoiseKind, NoiseSpec, SkewSpec};
use crate::dro_oracle::{dro_exhaustive, dual_dro_exhaustive, trilevel_exhaustive, write_oracle_csv, FiniteInstance, TieBreak};
use crate::error::{invalid, Error, Result};
use crate::hardness::{carve_split, probabilistic_margin, stratified_guard, write_split_csv, MarginRecord, SplitAssignment, Variant};
use crate::metrics::{evaluate, margin_gain_by_bucket, mean, median, ordering_check, paired_margin_delta, BucketGain, Histogram, MetricsReport, ModelTag, OrderingReport, VariantAccuracies};
use crate::models::Mlp;
use crate::trainer::{derive_seed, train_erm, train_lrw, train_lrwopt, write_log_csv, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentVariant {
    Erm,
    LrwHard,
    LrwEasy,
    LrwRandom,
    Lrwopt,
    Oracle,
}

impl ExperimentVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            other => other.tag().expect("model variant").name(),
        }
    }

    pub fn tag(self) -> Option<ModelTag> {
        Some(match self {
            Self::Erm => ModelTag::Erm,
            Self::LrwHard => ModelTag::LrwHard,
            Self::LrwEasy => ModelTag::LrwEasy,
            Self::LrwRandom => ModelTag::LrwRandom,
            Self::Lrwopt => ModelTag::Lrwopt,
            Self::Oracle => return None,
        })
    }

    fn carve(self) -> Option<Variant> {
        match self {
            Self::LrwHard => Some(Variant::Hard),
            Self::LrwEasy => Some(Variant::Easy),
            Self::LrwRandom => Some(Variant::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    GaussianMixture {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        separation: f64,
        test_per_class: usize,
    },
    TwoMoons {
        n: usize,
        noise_std: f64,
        n_test: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecipe {
    pub kind: NoiseKind,
    pub rate: f64,
}

/// How to build the training pool and the clean test set for one seed.
///
/// Noise and skew apply to the pool only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecipe {
    pub source: DataSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: Option<NoiseRecipe>,
    /// Largest-to-smallest class frequency of the pool.
    #[serde(default)]
    pub skew_ratio: Option<f64>,
}

const DATA_POOL: u64 = 101;
const DATA_TEST: u64 = 102;
const DATA_NOISE: u64 = 103;
const DATA_SKEW: u64 = 104;

/// Training pool (possibly noisy/skewed), its clean labels, and the test set.
#[derive(Clone, Debug)]
pub struct Materialized {
    pub pool: Dataset,
    pub clean_pool: Dataset,
    pub test: Dataset,
}

impl DatasetRecipe {
    fn data_seed(&self, run_seed: u64, purpose: u64) -> u64 {
        derive_seed(derive_seed(self.seed, run_seed), purpose)
    }

    pub fn materialize(&self, run_seed: u64) -> Result<Materialized> {
        let (mut pool, test) = match &self.source {
            DataSource::GaussianMixture { n_per_class, n_classes, dim, separation, test_per_class } => (
                make_gaussian_mixture(*n_per_class, *n_classes, *dim, *separation, self.data_seed(run_seed, DATA_POOL))?,
                make_gaussian_mixture(*test_per_class, *n_classes, *dim, *separation, self.data_seed(run_seed, DATA_TEST))?,
            ),
            DataSource::TwoMoons { n, noise_std, n_test } => (
                make_two_moons(*n, *noise_std, self.data_seed(run_seed, DATA_POOL))?,
                make_two_moons(*n_test, *noise_std, self.data_seed(run_seed, DATA_TEST))?,
            ),
            DataSource::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
        };
        if let Some(ratio) = self.skew_ratio {
            pool = apply_skew(&pool, &SkewSpec { ratio, seed: self.data_seed(run_seed, DATA_SKEW) })?;
        }
        let clean_pool = pool.clone();
        if let Some(n) = &self.noise {
            pool = inject_noise(&pool, &NoiseSpec { kind: n.kind, rate: n.rate, seed: self.data_seed(run_seed, DATA_NOISE) })?;
        }
        if test.n_features() != pool.n_features() {
            return Err(invalid("train and test feature counts differ"));
        }
        Ok(Materialized { pool, clean_pool, test })
    }
}

/// Oracle settings: an instance file checked with a weight grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub instance: PathBuf,
    #[serde(default = "default_grid")]
    pub weight_grid: Vec<u32>,
    #[serde(default)]
    pub tie_break: TieBreak,
}

fn default_grid() -> Vec<u32> {
    vec![0, 1, 2, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub variant: ExperimentVariant,
    pub seeds: Vec<u64>,
    pub outdir: PathBuf,
    #[serde(default)]
    pub dataset: Option<DatasetRecipe>,
    /// Epochs of the ERM margin pass for `lrw_*` variants.
    #[serde(default)]
    pub erm_epochs: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("cannot serialize spec: {e}")))
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| invalid(format!("train: {e}")))?;
        if self.variant == ExperimentVariant::Oracle {
            if self.oracle.is_none() {
                return Err(invalid("oracle: variant oracle requires an [oracle] section"));
            }
            return Ok(());
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds: at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(invalid("seeds: duplicate seed"));
        }
        if self.dataset.is_none() {
            return Err(invalid("dataset: model variants require a [dataset] section"));
        }
        if self.variant.carve().is_some() && self.erm_epochs.is_none() {
            return Err(invalid("erm_epochs: lrw_* variants need an ERM budget for the margin pass"));
        }
        if self.erm_epochs == Some(0) {
            return Err(invalid("erm_epochs: must be positive"));
        }
        if self.variant == ExperimentVariant::Lrwopt && self.train.warm_start_epochs >= self.train.max_epochs {
            return Err(invalid("train.warm_start_epochs: must be smaller than max_epochs"));
        }
        Ok(())
    }

    pub fn variant_dir(&self) -> PathBuf {
        self.outdir.join(self.variant.name())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.variant_dir().join(seed.to_string())
    }
}

/// Result of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: ExperimentVariant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub reference_accuracy: f64,
    /// Realized validation fraction of the split used, when there is one.
    pub val_fraction: Option<f64>,
    /// Mean pool margins under the final classifier, split by side.
    pub val_margin_mean: Option<f64>,
    pub train_margin_mean: Option<f64>,
    pub margin_buckets: Vec<BucketGain>,
}

/// Seed-level results plus the per-instance margins needed for pooling.
struct SeedOutput {
    report: RunReport,
    margins: Vec<MarginRecord>,
    reference: Vec<MarginRecord>,
}

fn write_margins(path: &Path, margins: &[MarginRecord], reference: &[MarginRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_index", "margin", "erm_margin"])?;
    for (m, r) in margins.iter().zip(reference) {
        w.write_record([m.instance_index.to_string(), m.margin.to_string(), r.margin.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn side_means(split: &SplitAssignment, margins: &[MarginRecord]) -> (f64, f64) {
    let pick = |idx: &[usize]| mean(&idx.iter().map(|&i| margins[i].margin).collect::<Vec<_>>());
    (pick(&split.val_indices), pick(&split.train_indices))
}

fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutput> {
    let recipe = spec.dataset.as_ref().expect("validated");
    let data = recipe.materialize(seed)?;
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    let dir = spec.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    let echo = ExperimentSpec { seeds: vec![seed], ..spec.clone() };
    fs::write(dir.join("config.toml"), echo.to_toml_string()?)?;

    let erm = train_erm::<f64>(&data.pool, &cfg)?;
    let (ref_acc, reference) = evaluate(&erm.state.classifier, &data.test)?;
    let mut split: Option<SplitAssignment> = None;
    let classifier: Mlp<f64> = match spec.variant {
        ExperimentVariant::Erm => {
            write_log_csv(&erm.log, dir.join("train_log.csv"))?;
            erm.state.classifier.clone()
        }
        v @ (ExperimentVariant::LrwHard | ExperimentVariant::LrwEasy | ExperimentVariant::LrwRandom) => {
            let budget = spec.erm_epochs.expect("validated");
            let margin_model = if budget == cfg.max_epochs {
                erm.state.classifier.clone()
            } else {
                train_erm::<f64>(&data.pool, &TrainConfig { max_epochs: budget, ..cfg.clone() })?.state.classifier
            };
            let pool_margins = probabilistic_margin(&margin_model, &data.pool)?;
            let carved = carve_split(&pool_margins, v.carve().expect("lrw variant"), cfg.delta, derive_seed(seed, 201))?;
            let s = stratified_guard(&carved, &data.pool, &pool_margins)?;
            write_split_csv(&s, &pool_margins, dir.join("split.csv"))?;
            let out = train_lrw::<f64>(&data.pool, &s, &cfg)?;
            write_log_csv(&out.log, dir.join("train_log.csv"))?;
            out.state.meta.as_ref().expect("lrw has a meta-network").mlp.save(dir.join("meta.json"))?;
            split = Some(s);
            out.state.classifier
        }
        ExperimentVariant::Lrwopt => {
            let out = train_lrwopt::<f64>(&data.pool, &cfg)?;
            write_log_csv(&out.log, dir.join("train_log.csv"))?;
            out.state.meta.as_ref().expect("meta").mlp.save(dir.join("meta.json"))?;
            out.state.splitter.as_ref().expect("splitter").mlp.save(dir.join("splitter.json"))?;
            let pool_margins = probabilistic_margin(&out.state.classifier, &data.pool)?;
            write_split_csv(&out.split, &pool_margins, dir.join("split.csv"))?;
            split = Some(out.split);
            out.state.classifier
        }
        ExperimentVariant::Oracle => unreachable!("oracle runs separately"),
    };
    classifier.save(dir.join("classifier.json"))?;

    let (acc, margins) = evaluate(&classifier, &data.test)?;
    write_margins(&dir.join("margins.csv"), &margins, &reference)?;
    let tag = spec.variant.tag().expect("model variant");
    let metrics = MetricsReport::new(tag, acc, &margins, Some(&reference))?;
    let (val_margin_mean, train_margin_mean) = match &split {
        Some(s) => {
            let pm = probabilistic_margin(&classifier, &data.pool)?;
            let (v, t) = side_means(s, &pm);
            (Some(v), Some(t))
        }
        None => (None, None),
    };
    let report = RunReport {
        variant: spec.variant,
        seed,
        metrics,
        reference_accuracy: ref_acc,
        val_fraction: split.as_ref().map(|s| s.delta_realized),
        val_margin_mean,
        train_margin_mean,
        margin_buckets: margin_gain_by_bucket(&margins, &reference)?,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(SeedOutput { report, margins, reference })
}

/// Seed-aggregated results of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub variant: ExperimentVariant,
    pub dataset: DatasetRecipe,
    pub seeds: Vec<u64>,
    /// `(seed, test accuracy)`.
    pub accuracies: Vec<(u64, f64)>,
    pub reference_accuracies: Vec<(u64, f64)>,
    /// Pooled over seeds; `seeds_aggregated` counts them.
    pub metrics: MetricsReport,
    pub margin_buckets: Vec<BucketGain>,
    pub val_fractions: Option<Vec<f64>>,
}

impl AggregateReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn aggregate(spec: &ExperimentSpec, outs: &[SeedOutput]) -> Result<AggregateReport> {
    let all_margins: Vec<MarginRecord> = offset_records(outs.iter().map(|o| &o.margins));
    let all_reference: Vec<MarginRecord> = offset_records(outs.iter().map(|o| &o.reference));
    let paired = paired_margin_delta(&all_margins, &all_reference)?;
    let accs: Vec<f64> = outs.iter().map(|o| o.report.metrics.test_accuracy).collect();
    let metrics = MetricsReport {
        model_tag: spec.variant.tag().expect("model variant"),
        test_accuracy: mean(&accs),
        mean_margin: mean(&all_margins.iter().map(|r| r.margin).collect::<Vec<_>>()),
        n_test: all_margins.len(),
        paired_margin_deltas: Some(paired.histogram),
        delta_mean: Some(paired.mean),
        delta_median: Some(paired.median),
        seeds_aggregated: outs.len(),
    };
    let fractions: Vec<f64> = outs.iter().filter_map(|o| o.report.val_fraction).collect();
    Ok(AggregateReport {
        variant: spec.variant,
        dataset: spec.dataset.clone().expect("validated"),
        seeds: outs.iter().map(|o| o.report.seed).collect(),
        accuracies: outs.iter().map(|o| (o.report.seed, o.report.metrics.test_accuracy)).collect(),
        reference_accuracies: outs.iter().map(|o| (o.report.seed, o.report.reference_accuracy)).collect(),
        metrics,
        margin_buckets: margin_gain_by_bucket(&all_margins, &all_reference)?,
        val_fractions: (!fractions.is_empty()).then_some(fractions),
    })
}

/// Concatenates per-seed margin lists, renumbering instances consecutively.
fn offset_records<'a>(lists: impl Iterator<Item = &'a Vec<MarginRecord>>) -> Vec<MarginRecord> {
    let mut out = Vec::new();
    for l in lists {
        let base = out.len();
        out.extend(l.iter().map(|r| MarginRecord { instance_index: base + r.instance_index, margin: r.margin }));
    }
    out
}

/// Outcome of [`run`].
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum RunOutcome {
    Models { aggregate: AggregateReport, per_seed: Vec<RunReport> },
    Oracle(OracleReport),
}

/// Runs every seed of `spec` and writes all artifacts. With `parallel`, seeds
/// run on separate threads; results are merged in seed-list order.
pub fn run(spec: &ExperimentSpec, parallel: bool) -> Result<RunOutcome> {
    spec.validate()?;
    if spec.variant == ExperimentVariant::Oracle {
        return run_oracle(spec.oracle.as_ref().expect("validated"), &spec.variant_dir()).map(RunOutcome::Oracle);
    }
    fs::create_dir_all(spec.variant_dir())?;
    let outs: Vec<SeedOutput> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = spec.seeds.iter().map(|&seed| s.spawn(move || run_seed(spec, seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| invalid("seed worker panicked"))?)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        spec.seeds.iter().map(|&seed| run_seed(spec, seed)).collect::<Result<Vec<_>>>()?
    };
    let aggregate = aggregate(spec, &outs)?;
    let dir = spec.variant_dir();
    fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&aggregate)? + "\n")?;
    if let Some(h) = &aggregate.metrics.paired_margin_deltas {
        h.write_csv(dir.join("margin_delta_histogram.csv"))?;
    }
    crate::metrics::write_buckets_csv(&aggregate.margin_buckets, dir.join("margin_buckets.csv"))?;
    Ok(RunOutcome::Models { aggregate, per_seed: outs.into_iter().map(|o| o.report).collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub subset_size: usize,
    pub dual_dro_value: u32,
    pub trilevel_value: u32,
    pub dro_value: u32,
    pub argmax_subset: Vec<usize>,
    pub tie_break: TieBreak,
    pub weight_grid: Vec<u32>,
    /// `trilevel == dual_dro`.
    pub equality_holds: bool,
    /// `dro >= dual_dro`.
    pub weak_duality_holds: bool,
}

/// Evaluates the three objectives on the instance file and writes
/// `oracle.csv` and `oracle_report.json` into `dir`.
pub fn run_oracle(o: &OracleSpec, dir: &Path) -> Result<OracleReport> {
    let inst = FiniteInstance::load(&o.instance)?;
    let tri = trilevel_exhaustive(&inst, &o.weight_grid, o.tie_break)?;
    let dual = dual_dro_exhaustive(&inst)?.dual_dro_value;
    let dro = dro_exhaustive(&inst)?;
    let trilevel = tri.trilevel_value.expect("computed");
    fs::create_dir_all(dir)?;
    write_oracle_csv(&tri, dir.join("oracle.csv"))?;
    let report = OracleReport {
        subset_size: tri.subset_size,
        dual_dro_value: dual,
        trilevel_value: trilevel,
        dro_value: dro,
        argmax_subset: tri.argmax_subset,
        tie_break: o.tie_break,
        weight_grid: o.weight_grid.clone(),
        equality_holds: trilevel == dual,
        weak_duality_holds: dro >= dual,
    };
    fs::write(dir.join("oracle_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub variant: ExperimentVariant,
    pub mean_accuracy: f64,
    /// Mean accuracy minus the baseline's, in accuracy points (×100).
    pub gain_points: f64,
    pub delta_mean: Option<f64>,
    pub delta_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: ExperimentVariant,
    pub seeds: Vec<u64>,
    pub gains: Vec<GainRow>,
    pub ordering: Option<OrderingReport>,
    pub margin_buckets: Vec<(ExperimentVariant, Vec<BucketGain>)>,
}

/// Gains over the ERM report (or the first variant in canonical order when
/// no ERM report is given), plus the ordering check when all three LRW
/// variants are present. Argument order never affects the output; identical
/// reports given twice count once.
pub fn compare(reports: &[AggregateReport]) -> Result<ComparisonReport> {
    let first = reports.first().ok_or_else(|| invalid("compare needs at least one report"))?;
    for r in reports {
        if r.dataset != first.dataset {
            return Err(invalid(format!("report {} uses a different dataset recipe", r.variant.name())));
        }
        if r.seeds != first.seeds {
            return Err(invalid(format!("report {} uses a different seed list", r.variant.name())));
        }
    }
    let mut sorted: Vec<&AggregateReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.variant);
    for pair in sorted.windows(2) {
        if pair[0].variant == pair[1].variant && pair[0] != pair[1] {
            return Err(invalid(format!("two different reports for variant {}", pair[0].variant.name())));
        }
    }
    sorted.dedup_by_key(|r| r.variant);
    let base = sorted.iter().find(|r| r.variant == ExperimentVariant::Erm).copied().unwrap_or(sorted[0]);
    let gains = sorted
        .iter()
        .map(|r| GainRow {
            variant: r.variant,
            mean_accuracy: r.metrics.test_accuracy,
            gain_points: 100.0 * (r.metrics.test_accuracy - base.metrics.test_accuracy),
            delta_mean: r.metrics.delta_mean,
            delta_median: r.metrics.delta_median,
        })
        .collect();
    let lrw: Vec<VariantAccuracies> = sorted
        .iter()
        .filter(|r| r.variant.carve().is_some())
        .map(|r| VariantAccuracies { tag: r.variant.tag().expect("model"), runs: r.accuracies.clone() })
        .collect();
    let ordering = (lrw.len() == 3 && first.seeds.len() >= 2).then(|| ordering_check(&lrw)).transpose()?;
    Ok(ComparisonReport {
        baseline: base.variant,
        seeds: first.seeds.clone(),
        gains,
        ordering,
        margin_buckets: sorted.iter().map(|r| (r.variant, r.margin_buckets.clone())).collect(),
    })
}

pub fn write_comparison(c: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(c)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("gains.csv"))?;
    w.write_record(["variant", "mean_accuracy", "gain_points", "delta_mean", "delta_median"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for g in &c.gains {
        w.write_record([
            g.variant.name().to_string(),
            g.mean_accuracy.to_string(),
            g.gain_points.to_string(),
            opt(g.delta_mean),
            opt(g.delta_median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pooled deltas and medians, exposed for callers that hold raw margins.
pub fn pooled_delta_summary(margins: &[Vec<MarginRecord>], reference: &[Vec<MarginRecord>]) -> Result<(f64, f64, Histogram)> {
    let a = offset_records(margins.iter());
    let b = offset_records(reference.iter());
    let p = paired_margin_delta(&a, &b)?;
    let deltas: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.margin - y.margin).collect();
    Ok((p.mean, median(&deltas), p.histogram))
}

impl From<&Error> for ExitKind {
    fn from(e: &Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::NonFiniteGradient(_) | Error::DegenerateSplit(_) => ExitKind::TrainingAbort,
            Error::Io(_) => ExitKind::Io,
            Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => ExitKind::Io,
            _ => ExitKind::Validation,
        }
    }
}

/// Failure classes mapped to process exit codes by front ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Validation,
    TrainingAbort,
    Io,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Validation => 1,
            ExitKind::TrainingAbort => 2,
            ExitKind::Io => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
variant = "lrw_hard"
seeds = [0, 1]
outdir = "out"
erm_epochs = 4

[dataset]
seed = 7
skew_ratio = 2.0

[dataset.source]
kind = "gaussian_mixture"
n_per_class = 50
n_classes = 2
dim = 3
separation = 2.0
test_per_class = 40

[dataset.noise]
kind = "uniform_flip"
rate = 0.2

[train]
max_epochs = 4
delta = 0.2
"#;

    #[test]
    fn spec_parses_and_round_trips() {
        let s = ExperimentSpec::from_toml_str(SPEC).unwrap();
        assert_eq!(s.variant, ExperimentVariant::LrwHard);
        assert_eq!(s.train.delta, 0.2);
        assert_eq!(s.train.q, 5);
        let d = s.dataset.as_ref().unwrap();
        assert!(matches!(d.source, DataSource::GaussianMixture { n_per_class: 50, .. }));
        assert_eq!(d.noise.as_ref().unwrap().rate, 0.2);
        assert_eq!(ExperimentSpec::from_toml_str(&s.to_toml_string().unwrap()).unwrap(), s);
        assert_eq!(s.seed_dir(1), PathBuf::from("out/lrw_hard/1"));
    }

    #[test]
    fn validation_names_the_field() {
        let err = |t: &str| ExperimentSpec::from_toml_str(t).unwrap_err().to_string();
        assert!(err(&SPEC.replace("erm_epochs = 4\n", "")).contains("erm_epochs"));
        assert!(err(&SPEC.replace("seeds = [0, 1]", "seeds = []")).contains("seeds"));
        assert!(err(&SPEC.replace("seeds = [0, 1]", "seeds = [3, 3]")).contains("duplicate"));
        assert!(err(&SPEC.replace("delta = 0.2", "delta = 2.0")).contains("delta"));
        assert!(err("variant = \"oracle\"\nseeds = []\noutdir = \"o\"\n").contains("oracle"));
        assert!(err("variant = \"erm\"\nseeds = [0]\noutdir = \"o\"\n").contains("dataset"));
        assert!(ExperimentSpec::from_toml_str(&SPEC.replace("rate = 0.2", "rate = 0.2\nbogus = 1")).is_err());
    }

    #[test]
    fn materialize_is_deterministic_and_keeps_test_clean() {
        let s = ExperimentSpec::from_toml_str(SPEC).unwrap();
        let d = s.dataset.unwrap();
        let a = d.materialize(3).unwrap();
        let b = d.materialize(3).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.test, b.test);
        assert_ne!(a.pool, d.materialize(4).unwrap().pool);
        let flips = a.pool.labels().iter().zip(a.clean_pool.labels()).filter(|(x, y)| x != y).count();
        assert_eq!(flips, (0.2 * a.pool.len() as f64).round() as usize);
        assert_eq!(a.test.class_counts(), vec![40, 40]);
        let counts = a.pool.class_counts();
        assert_eq!(counts.iter().max().unwrap() / counts.iter().min().unwrap(), 2);
    }

    fn report(variant: ExperimentVariant, accs: &[f64]) -> AggregateReport {
        let seeds: Vec<u64> = (0..accs.len() as u64).collect();
        let mean_acc = mean(accs);
        AggregateReport {
            variant,
            dataset: DatasetRecipe {
                source: DataSource::TwoMoons { n: 10, noise_std: 0.1, n_test: 10 },
                seed: 0,
                noise: None,
                skew_ratio: None,
            },
            seeds: seeds.clone(),
            accuracies: seeds.iter().copied().zip(accs.iter().copied()).collect(),
            reference_accuracies: vec![],
            metrics: MetricsReport {
                model_tag: variant.tag().unwrap(),
                test_accuracy: mean_acc,
                mean_margin: 0.0,
                n_test: 10,
                paired_margin_deltas: None,
                delta_mean: None,
                delta_median: None,
                seeds_aggregated: accs.len(),
            },
            margin_buckets: vec![],
            val_fractions: None,
        }
    }

    #[test]
    fn compare_with_itself_has_zero_gain() {
        let r = report(ExperimentVariant::LrwHard, &[0.8, 0.9]);
        let c = compare(&[r.clone(), r]).unwrap();
        assert_eq!(c.gains.len(), 1);
        assert_eq!(c.gains[0].gain_points, 0.0);
    }

    #[test]
    fn compare_gain_arithmetic_and_order_independence() {
        let erm = report(ExperimentVariant::Erm, &[0.70, 0.72]);
        let easy = report(ExperimentVariant::LrwEasy, &[0.69, 0.71]);
        let hard = report(ExperimentVariant::LrwHard, &[0.74, 0.76]);
        let random = report(ExperimentVariant::LrwRandom, &[0.71, 0.73]);
        let c = compare(&[hard.clone(), erm.clone(), random.clone(), easy.clone()]).unwrap();
        assert_eq!(c.baseline, ExperimentVariant::Erm);
        let gain = |v| c.gains.iter().find(|g| g.variant == v).unwrap().gain_points;
        assert!((gain(ExperimentVariant::LrwHard) - 4.0).abs() < 1e-9);
        assert!((gain(ExperimentVariant::LrwEasy) + 1.0).abs() < 1e-9);
        assert!((gain(ExperimentVariant::LrwRandom) - 1.0).abs() < 1e-9);
        assert_eq!(c.ordering.as_ref().unwrap().verdict, crate::metrics::Verdict::Holds);
        assert_eq!(compare(&[easy, random, erm, hard]).unwrap(), c);
    }

    #[test]
    fn compare_rejects_mismatched_reports() {
        let a = report(ExperimentVariant::Erm, &[0.7, 0.7]);
        let b = report(ExperimentVariant::LrwHard, &[0.7, 0.7, 0.7]);
        assert!(compare(&[a.clone(), b]).is_err());
        let mut c = report(ExperimentVariant::LrwHard, &[0.7, 0.7]);
        c.dataset.seed = 9;
        assert!(compare(&[a.clone(), c]).is_err());
        let d = report(ExperimentVariant::Erm, &[0.6, 0.7]);
        assert!(compare(&[a, d]).is_err());
        assert!(compare(&[]).is_err());
    }

    #[test]
    fn exit_kinds() {
        assert_eq!(ExitKind::from(&Error::Diverged { step: 3, what: "x".into() }).code(), 2);
        assert_eq!(ExitKind::from(&Error::DegenerateSplit("x".into())).code(), 2);
        assert_eq!(ExitKind::from(&invalid("x")).code(), 1);
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(ExitKind::from(&io).code(), 3);
    }
}
