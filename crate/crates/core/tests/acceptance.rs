//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p lrw-core --test acceptance` (built with opt-level 3 in the test profile).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lrw_core::datagen::{make_gaussian_mixture, NoiseKind};
use lrw_core::diffcore::{Primitive, Tape, Tensor, Var};
use lrw_core::dro_oracle::{dro_exhaustive, dual_dro_exhaustive, random_instance, trilevel_exhaustive, TieBreak};
use lrw_core::experiment::{self, AggregateReport, DataSource, DatasetRecipe, ExperimentSpec, ExperimentVariant, NoiseRecipe, RunOutcome, RunReport};
use lrw_core::hardness::{carve_split, probabilistic_margin, stratified_guard, Variant};
use lrw_core::metrics::{mean, Verdict};
use lrw_core::models::{Activation, InitScheme, MetaNet, Mlp, ParamSet};
use lrw_core::trainer::meta::{meta_gradient, Batch};
use lrw_core::trainer::{derive_seed, learned_weights, train_erm, train_lrw, MetaInput, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt() / std::f64::consts::SQRT_2;
    diff / scale.max(1e-12)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// Validation cross-entropy after one plain SGD step on the meta-weighted
/// training loss, with the softmax written out by hand.
fn lookahead_val_loss(c: &Mlp<f64>, meta: &MetaNet<f64>, tr: &Batch<f64>, va: &Batch<f64>, beta3: f64) -> f64 {
    let w = meta.meta_weights(&tr.x).unwrap();
    let tape = Tape::new();
    let bound = c.params.bind(&tape, true);
    let out = c.trace(&bound, tape.constant(tr.x.clone()), None).unwrap().out;
    let loss = out.cross_entropy_rows(&tr.y).unwrap().mul(tape.constant(Tensor::vector(w))).unwrap().mean();
    let g = bound.flat_grads(&tape.backward(loss).unwrap());
    let stepped: Vec<f64> = c.params.values().iter().zip(&g).map(|(p, g)| p - beta3 * g).collect();
    let mut next = c.clone();
    next.params = ParamSet::from_values(c.params.widths(), stepped).unwrap();
    let z = next.forward(&va.x).unwrap();
    let total: f64 = (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[va.y[r]]
        })
        .sum();
    total / z.rows() as f64
}

fn criterion_1() -> Outcome {
    let h = 1e-5;
    let configs: [(&[usize], &[usize], Activation); 4] = [
        (&[4, 16, 16, 3], &[16, 16], Activation::Tanh),
        (&[4, 16, 16, 3], &[16, 16], Activation::Relu),
        (&[4, 16, 2], &[16], Activation::Tanh),
        (&[3, 8, 8, 4], &[8], Activation::Relu),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, (cw, mh, act)) in configs.iter().enumerate() {
        let seed = 100 + k as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cw[0];
        let classes = *cw.last().unwrap();
        let batch = |rng: &mut ChaCha8Rng, m: usize| Batch {
            x: random_tensor(rng, &[m, d], 1.5),
            y: (0..m).map(|_| rng.gen_range(0..classes)).collect(),
            indices: (0..m).collect(),
        };
        let (tr, va) = (batch(&mut rng, 10), batch(&mut rng, 7));
        let c = Mlp::<f64>::new(cw, *act, seed, InitScheme::UniformGlorot).unwrap();
        let meta = MetaNet::<f64>::new(d, mh, *act, seed + 50, InitScheme::UniformGlorot).unwrap();
        let beta3 = 0.3;
        let g = meta_gradient(&c, &meta, &tr.x, &tr, &va, beta3).unwrap();
        let num: Vec<f64> = (0..meta.mlp.params.len())
            .map(|i| {
                let mut up = meta.clone();
                up.mlp.params.values_mut()[i] += h;
                let mut dn = meta.clone();
                dn.mlp.params.values_mut()[i] -= h;
                (lookahead_val_loss(&c, &up, &tr, &va, beta3) - lookahead_val_loss(&c, &dn, &tr, &va, beta3)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&g.grad, &num));
        checked += num.len();
    }
    outcome(
        1,
        "meta-gradient vs finite differences",
        worst <= 1e-4,
        format!("{} networks, {checked} meta parameters, max rel err {worst:.2e} (tol 1e-4)", configs.len()),
    )
}

// ---------------------------------------------------------------- criterion 2

#[derive(Clone, Debug)]
enum GraphOp {
    Unary(Primitive, usize),
    Binary(Primitive, usize, usize),
    MatMulW(usize),
    AddBias(usize),
    Sub(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Neg(usize),
    Clamp(usize),
    LogPositive(usize),
    Rows(usize, Vec<usize>),
}

struct Graph {
    shapes: Vec<Vec<usize>>,
    ops: Vec<GraphOp>,
    labels: Vec<usize>,
    probe_node: usize,
}

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let (r, c) = (rng.gen_range(2..5), rng.gen_range(2..5));
    // Inputs: two [r, c] leaves, a [c, c] matrix, a [c] bias.
    let shapes = vec![vec![r, c], vec![r, c], vec![c, c], vec![c]];
    let mut ops = Vec::new();
    let mut nodes = vec![0usize, 1];
    let depth = rng.gen_range(3..12);
    for _ in 0..depth {
        let a = *nodes.choose(rng).unwrap();
        let b = *nodes.choose(rng).unwrap();
        let op = match rng.gen_range(0..16) {
            0 => GraphOp::Unary(Primitive::Tanh, a),
            1 => GraphOp::Unary(Primitive::Sigmoid, a),
            2 => GraphOp::Unary(Primitive::Softplus, a),
            3 => GraphOp::Unary(Primitive::Relu, a),
            4 => GraphOp::Unary(Primitive::SoftmaxRows, a),
            5 => GraphOp::Binary(Primitive::Add, a, b),
            6 => GraphOp::Binary(Primitive::Mul, a, b),
            7 => GraphOp::MatMulW(a),
            8 => GraphOp::AddBias(a),
            9 => GraphOp::Sub(a, b),
            10 => GraphOp::Div(a, b),
            11 => GraphOp::Scale(a, rng.gen_range(-2.0..2.0)),
            12 => GraphOp::AddScalar(a, rng.gen_range(-1.0..1.0)),
            13 => GraphOp::Neg(a),
            14 => GraphOp::LogPositive(a),
            _ => GraphOp::Rows(a, (0..r).map(|_| rng.gen_range(0..r)).collect()),
        };
        ops.push(op);
        nodes.push(ops.len() + 1);
    }
    if rng.gen_bool(0.3) {
        ops.push(GraphOp::Clamp(*nodes.last().unwrap()));
        nodes.push(ops.len() + 1);
    }
    let probe_node = *nodes.choose(rng).unwrap();
    Graph { shapes, ops, labels: (0..r).map(|_| rng.gen_range(0..c)).collect(), probe_node }
}

/// Node ids: 0, 1 are leaves; op `k` produces node `k + 2`. Returns the scalar root.
fn build<'t>(tape: &'t Tape<f64>, g: &Graph, leaves: &[Var<'t, f64>]) -> Var<'t, f64> {
    let (w, bias) = (leaves[2], leaves[3]);
    let mut v: Vec<Var<'t, f64>> = vec![leaves[0], leaves[1]];
    for op in &g.ops {
        let out = match op {
            GraphOp::Unary(p, a) => tape.forward_primitive(p, &[v[*a]]).unwrap(),
            GraphOp::Binary(p, a, b) => tape.forward_primitive(p, &[v[*a], v[*b]]).unwrap(),
            GraphOp::MatMulW(a) => tape.forward_primitive(&Primitive::MatMul, &[v[*a], w]).unwrap(),
            GraphOp::AddBias(a) => v[*a].add(bias).unwrap(),
            GraphOp::Sub(a, b) => v[*a].sub(v[*b]).unwrap(),
            GraphOp::Div(a, b) => v[*a].div(v[*b].softplus().add_scalar(0.5)).unwrap(),
            GraphOp::Scale(a, s) => v[*a].scale(*s),
            GraphOp::AddScalar(a, s) => v[*a].add_scalar(*s),
            GraphOp::Neg(a) => v[*a].neg(),
            GraphOp::Clamp(a) => v[*a].clamp(-1.5, 1.5),
            GraphOp::LogPositive(a) => v[*a].sigmoid().add_scalar(0.1).log(),
            GraphOp::Rows(a, idx) => tape.forward_primitive(&Primitive::IndexSelect(idx.clone()), &[v[*a]]).unwrap(),
        };
        v.push(out);
    }
    let last = *v.last().unwrap();
    let probe = v[g.probe_node];
    let n = probe.value().numel();
    let coef = tape.constant(Tensor::new(probe.shape(), (0..n).map(|i| 0.2 + 0.13 * i as f64).collect()).unwrap());
    last.cross_entropy(&g.labels).unwrap().add(probe.mul(coef).unwrap().sum()).unwrap()
}

fn check_graph(g: &Graph, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&tape, g, &leaves);
    let grads = tape.backward(root).unwrap();
    let eval = |vals: &[Tensor<f64>]| {
        let tape = Tape::new();
        let leaves: Vec<Var<'_, f64>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        build(&tape, g, &leaves).value().item()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, leaf) in leaves.iter().enumerate() {
        analytic.extend_from_slice(grads.wrt(leaf).data());
        for i in 0..inputs[k].numel() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut dn = inputs.to_vec();
            dn[k].data_mut()[i] -= h;
            numeric.push((eval(&up) - eval(&dn)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

type GraphFn<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64> + 'a;

/// Each primitive alone, fed through a fixed linear read-out.
fn primitive_errors(h: f64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[3, 4], 1.2);
    let y = random_tensor(&mut rng, &[3, 4], 1.2);
    let w = random_tensor(&mut rng, &[4, 2], 1.0);
    let unary = [
        Primitive::Relu,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Softplus,
        Primitive::SoftmaxRows,
        Primitive::Log,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::IndexSelect(vec![2, 0, 2, 1]),
    ];
    let readout = |tape: &Tape<f64>, v: Var<'_, f64>| -> f64 {
        let n = v.value().numel();
        let c = tape.constant(Tensor::new(v.shape(), (0..n).map(|i| 0.4 - 0.07 * i as f64).collect()).unwrap());
        v.mul(c).unwrap().sum().value().item()
    };
    let mut out = Vec::new();
    let grad_of = |inputs: Vec<Tensor<f64>>, f: &GraphFn<'_>| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let v = f(&tape, &leaves);
        let n = v.value().numel();
        let c = tape.constant(Tensor::new(v.shape(), (0..n).map(|i| 0.4 - 0.07 * i as f64).collect()).unwrap());
        let g = tape.backward(v.mul(c).unwrap().sum()).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (k, leaf) in leaves.iter().enumerate() {
            analytic.extend_from_slice(g.wrt(leaf).data());
            for i in 0..inputs[k].numel() {
                let shifted = |d: f64| {
                    let mut vals = inputs.clone();
                    vals[k].data_mut()[i] += d;
                    let tape = Tape::new();
                    let ls: Vec<Var<'_, f64>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
                    readout(&tape, f(&tape, &ls))
                };
                numeric.push((shifted(h) - shifted(-h)) / (2.0 * h));
            }
        }
        rel_err(&analytic, &numeric)
    };
    for p in unary {
        let input = if p == Primitive::Log { x.map(|v| v.abs() + 0.3) } else { x.clone() };
        let e = grad_of(vec![input], &|t, l| t.forward_primitive(&p, &[l[0]]).unwrap());
        out.push((format!("{p:?}"), e));
    }
    out.push(("MatMul".into(), grad_of(vec![x.clone(), w.clone()], &|t, l| t.forward_primitive(&Primitive::MatMul, &[l[0], l[1]]).unwrap())));
    out.push(("Add".into(), grad_of(vec![x.clone(), y.clone()], &|t, l| t.forward_primitive(&Primitive::Add, &[l[0], l[1]]).unwrap())));
    out.push(("Mul".into(), grad_of(vec![x.clone(), y.clone()], &|t, l| t.forward_primitive(&Primitive::Mul, &[l[0], l[1]]).unwrap())));
    out.push(("sub".into(), grad_of(vec![x.clone(), y.clone()], &|_, l| l[0].sub(l[1]).unwrap())));
    out.push(("div".into(), grad_of(vec![x.clone(), y.map(|v| v.abs() + 0.5)], &|_, l| l[0].div(l[1]).unwrap())));
    out.push(("scale".into(), grad_of(vec![x.clone()], &|_, l| l[0].scale(-1.7))));
    out.push(("add_scalar".into(), grad_of(vec![x.clone()], &|_, l| l[0].add_scalar(0.3))));
    out.push(("neg".into(), grad_of(vec![x.clone()], &|_, l| l[0].neg())));
    out.push(("clamp".into(), grad_of(vec![x.clone()], &|_, l| l[0].clamp(-0.5, 0.5))));
    out.push(("reshape".into(), grad_of(vec![x.clone()], &|_, l| l[0].reshape(&[2, 6]).unwrap())));
    out.push(("cross_entropy_rows".into(), grad_of(vec![x.clone()], &|_, l| l[0].cross_entropy_rows(&[3, 0, 1]).unwrap())));
    out.push(("cross_entropy".into(), grad_of(vec![x.clone()], &|_, l| l[0].cross_entropy(&[1, 1, 2]).unwrap())));
    out.push((
        "broadcast add/mul".into(),
        grad_of(vec![x.clone(), random_tensor(&mut rng, &[4], 1.0), Tensor::scalar(0.7)], &|_, l| {
            l[0].add(l[1]).unwrap().mul(l[2]).unwrap()
        }),
    ));
    out
}

fn criterion_2() -> Outcome {
    let h = 1e-6;
    let prims = primitive_errors(h);
    let (worst_prim, prim_err) = prims.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut graph_worst = 0.0f64;
    let mut failures = 0;
    let mut total_ops = 0;
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        total_ops += g.ops.len();
        let inputs: Vec<Tensor<f64>> = g.shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
        let e = check_graph(&g, &inputs, h);
        if e > 1e-5 {
            failures += 1;
        }
        graph_worst = graph_worst.max(e);
    }
    outcome(
        2,
        "autodiff vs finite differences",
        prim_err <= 1e-5 && failures == 0,
        format!(
            "{} primitive checks, max rel err {prim_err:.2e} ({worst_prim}); 100 random graphs ({total_ops} ops), \
             max rel err {graph_worst:.2e}, {failures} over tol 1e-5",
            prims.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let grid = [0, 1, 2, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut equal, mut weak, mut first_listed_equal) = (0, 0, 0);
    let n_instances = 240;
    for k in 0..n_instances {
        let delta = if k % 2 == 0 { 0.25 } else { 0.5 };
        let n = rng.gen_range(4..=12);
        let n_x = rng.gen_range(2..=4);
        let classes: usize = rng.gen_range(2..=3);
        let space = classes.pow(n_x as u32);
        let n_h = rng.gen_range(1..=space.min(16));
        let inst = random_instance(rng.gen(), n, n_x, classes, n_h, delta).expect("valid instance");
        let dual = dual_dro_exhaustive(&inst).unwrap().dual_dro_value;
        let tri = trilevel_exhaustive(&inst, &grid, TieBreak::ValidationOptimal).unwrap().trilevel_value.unwrap();
        let first = trilevel_exhaustive(&inst, &grid, TieBreak::FirstListed).unwrap().trilevel_value.unwrap();
        let dro = dro_exhaustive(&inst).unwrap();
        equal += usize::from(tri == dual);
        weak += usize::from(dro >= dual);
        first_listed_equal += usize::from(first == dual);
    }
    outcome(
        3,
        "trilevel = dual DRO <= DRO on random instances",
        equal == n_instances && weak == n_instances,
        format!(
            "{n_instances} instances: trilevel == dual on {equal}, dro >= dual on {weak} \
             (validation-optimal tie-break; first-listed tie-break agrees on {first_listed_equal})"
        ),
    )
}

// ---------------------------------------------------------- criteria 4 to 7

const SEEDS: std::ops::Range<u64> = 0..10;

/// Epoch budget of the ERM model whose margins carve the LRW splits.
const MARGIN_EPOCHS: usize = 5;

fn bench_config() -> TrainConfig {
    TrainConfig { lr_splitter: 0.1, reg_ratio_weight: 20.0, lr_meta: 0.001, max_epochs: 30, warm_start_epochs: 5, ..TrainConfig::default() }
}

fn gaussian_recipe(noise: Option<f64>, skew: Option<f64>) -> DatasetRecipe {
    DatasetRecipe {
        source: DataSource::GaussianMixture { n_per_class: 1000, n_classes: 2, dim: 10, separation: 2.2, test_per_class: 2500 },
        seed: 7,
        noise: noise.map(|rate| NoiseRecipe { kind: NoiseKind::UniformFlip, rate }),
        skew_ratio: skew,
    }
}

fn spec(variant: ExperimentVariant, dataset: DatasetRecipe, outdir: &Path, seeds: Vec<u64>) -> ExperimentSpec {
    let train = bench_config();
    ExperimentSpec {
        variant,
        seeds,
        outdir: outdir.to_path_buf(),
        dataset: Some(dataset),
        erm_epochs: variant.tag().and(Some(MARGIN_EPOCHS)),
        train,
        oracle: None,
    }
}

fn run_models(s: &ExperimentSpec) -> lrw_core::Result<(AggregateReport, Vec<RunReport>)> {
    match experiment::run(s, true)? {
        RunOutcome::Models { aggregate, per_seed } => Ok((aggregate, per_seed)),
        RunOutcome::Oracle(_) => unreachable!("model variant"),
    }
}

fn criteria_4_to_7(root: &Path) -> Vec<Outcome> {
    let variants = [
        ExperimentVariant::Erm,
        ExperimentVariant::LrwEasy,
        ExperimentVariant::LrwRandom,
        ExperimentVariant::LrwHard,
        ExperimentVariant::Lrwopt,
    ];
    let mut aggs = BTreeMap::new();
    let mut per_seed = BTreeMap::new();
    for v in variants {
        match run_models(&spec(v, gaussian_recipe(Some(0.2), None), root, SEEDS.collect())) {
            Ok((a, p)) => {
                aggs.insert(v, a);
                per_seed.insert(v, p);
            }
            Err(e) => {
                let msg = format!("{} run failed: {e}", v.name());
                return [(4, "Easy < Random < Hard, Hard beats ERM"), (5, "LRWOpt within 0.5 pts of Hard"), (6, "positive margin delta"), (7, "split discovery")]
                    .into_iter()
                    .map(|(id, name)| outcome(id, name, false, msg.clone()))
                    .collect();
            }
        }
    }
    let acc = |v: ExperimentVariant| 100.0 * aggs[&v].metrics.test_accuracy;
    let cmp = experiment::compare(&aggs.values().cloned().collect::<Vec<_>>()).expect("comparable reports");
    let ordering = cmp.ordering.as_ref().expect("all LRW variants present");
    let (erm, easy, random, hard, opt) = (
        acc(ExperimentVariant::Erm),
        acc(ExperimentVariant::LrwEasy),
        acc(ExperimentVariant::LrwRandom),
        acc(ExperimentVariant::LrwHard),
        acc(ExperimentVariant::Lrwopt),
    );
    let c4 = outcome(
        4,
        "Easy < Random < Hard, Hard beats ERM",
        ordering.verdict == Verdict::Holds && hard - erm >= 0.5,
        format!(
            "mean acc % ERM {erm:.2}, Easy {easy:.2}, Random {random:.2}, Hard {hard:.2}; Hard - ERM {:+.2} pts (need >= 0.5); \
             per-seed wins hard>random {}/{}, random>easy {}/{}",
            hard - erm,
            ordering.hard_over_random_wins,
            ordering.n_seeds,
            ordering.random_over_easy_wins,
            ordering.n_seeds
        ),
    );
    let c5 = outcome(
        5,
        "LRWOpt within 0.5 pts of Hard",
        opt >= hard - 0.5,
        format!("mean acc % LRWOpt {opt:.2}, Hard {hard:.2}, diff {:+.2} pts (need >= -0.5)", opt - hard),
    );
    let m = &aggs[&ExperimentVariant::Lrwopt].metrics;
    let (dm, dmed) = (m.delta_mean.unwrap(), m.delta_median.unwrap());
    let c6 = outcome(
        6,
        "positive margin delta",
        dm > 0.0 && dmed > 0.0,
        format!("LRWOpt - ERM paired test margin over {} instances: mean {dm:.4}, median {dmed:.4}", m.n_test),
    );
    let runs = &per_seed[&ExperimentVariant::Lrwopt];
    let delta = bench_config().delta;
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| {
            let f = r.val_fraction.unwrap();
            !((delta - 0.05..=delta + 0.05).contains(&f) && r.val_margin_mean.unwrap() < r.train_margin_mean.unwrap())
        })
        .map(|r| format!("seed {}", r.seed))
        .collect();
    let fr: Vec<f64> = runs.iter().map(|r| r.val_fraction.unwrap()).collect();
    let gap: Vec<f64> = runs.iter().map(|r| r.train_margin_mean.unwrap() - r.val_margin_mean.unwrap()).collect();
    let c7 = outcome(
        7,
        "split discovery",
        bad.is_empty(),
        format!(
            "val fraction range [{:.3}, {:.3}] (need [{:.2}, {:.2}]), train - val margin gap min {:.3}; failing: {}",
            fr.iter().cloned().fold(f64::INFINITY, f64::min),
            fr.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            delta - 0.05,
            delta + 0.05,
            gap.iter().cloned().fold(f64::INFINITY, f64::min),
            if bad.is_empty() { "none".into() } else { bad.join(", ") }
        ),
    );
    vec![c4, c5, c6, c7]
}

// ---------------------------------------------------------------- criterion 8

/// Clean hard validation side carved by ERM margin; 30% of the train side
/// gets its label flipped before LRW training.
fn noise_weight_gap(seed: u64) -> lrw_core::Result<(f64, f64)> {
    let clean = make_gaussian_mixture(1000, 2, 10, 4.5, derive_seed(800, seed))?;
    let cfg = TrainConfig { seed, lr_meta: 1.0, meta_input: MetaInput::FeaturesAndLabel, ..TrainConfig::default() };
    let erm = train_erm::<f64>(&clean, &cfg)?;
    let margins = probabilistic_margin(&erm.state.classifier, &clean)?;
    let split = stratified_guard(&carve_split(&margins, Variant::Hard, cfg.delta, seed)?, &clean, &margins)?;
    let mut train = split.train_indices.clone();
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(801, seed)));
    let flipped: HashSet<usize> = train[..(0.3 * train.len() as f64).round() as usize].iter().copied().collect();
    let labels = clean.labels().iter().enumerate().map(|(i, &y)| if flipped.contains(&i) { 1 - y } else { y }).collect();
    let noisy = clean.with_labels(labels)?;
    let out = train_lrw::<f64>(&noisy, &split, &cfg)?;
    let w = learned_weights(&out.state, &cfg, &noisy, &split.train_indices)?;
    let (mut wf, mut wc) = (Vec::new(), Vec::new());
    for (k, i) in split.train_indices.iter().enumerate() {
        if flipped.contains(i) { &mut wf } else { &mut wc }.push(w[k]);
    }
    Ok((mean(&wf), mean(&wc)))
}

fn criterion_8() -> Outcome {
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = SEEDS.map(|seed| s.spawn(move || noise_weight_gap(seed))).collect();
        hs.into_iter().map(|h| h.join().expect("worker")).collect()
    });
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.zip(&results) {
        match r {
            Ok((f, c)) => {
                wins += usize::from(f < c);
                parts.push(format!("{seed}:{f:.3}/{c:.3}"));
            }
            Err(e) => parts.push(format!("{seed}:error {e}")),
        }
    }
    outcome(
        8,
        "flipped instances get lower weight",
        wins >= 9,
        format!("{wins}/10 seeds with mean weight flipped < clean (need >= 9); seed:flipped/clean {}", parts.join(" ")),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(root: &Path) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for skew in [10.0, 50.0] {
        let dir = root.join(format!("skew{skew}"));
        let per_variant = |v: ExperimentVariant| -> Vec<(u64, lrw_core::Result<f64>)> {
            std::thread::scope(|s| {
                let hs: Vec<_> = SEEDS
                    .map(|seed| {
                        let sp = spec(v, gaussian_recipe(None, Some(skew)), &dir.join(seed.to_string()), vec![seed]);
                        s.spawn(move || (seed, run_models(&sp).map(|(a, _)| a.metrics.test_accuracy)))
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().expect("worker")).collect()
            })
        };
        let erm = per_variant(ExperimentVariant::Erm);
        let opt = per_variant(ExperimentVariant::Lrwopt);
        let erm_acc: Vec<f64> = erm.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).collect();
        let opt_acc: Vec<f64> = opt.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).collect();
        let failed: Vec<String> = erm
            .iter()
            .chain(&opt)
            .filter_map(|(seed, r)| r.as_ref().err().map(|e| format!("seed {seed}: {e}")))
            .collect();
        let (me, mo) = (100.0 * mean(&erm_acc), 100.0 * mean(&opt_acc));
        pass &= failed.is_empty() && mo >= me;
        parts.push(format!(
            "skew {skew}: ERM {me:.2}% LRWOpt {mo:.2}% ({}/10 LRWOpt runs completed{})",
            opt_acc.len(),
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ));
    }
    outcome(9, "LRWOpt >= ERM under class skew", pass, parts.join(" | "))
}

// --------------------------------------------------------------- criterion 10

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(root: &Path) -> Outcome {
    let recipe = DatasetRecipe {
        source: DataSource::TwoMoons { n: 400, noise_std: 0.2, n_test: 400 },
        seed: 3,
        noise: Some(NoiseRecipe { kind: NoiseKind::UniformFlip, rate: 0.2 }),
        skew_ratio: None,
    };
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (k, v) in [ExperimentVariant::Erm, ExperimentVariant::LrwHard, ExperimentVariant::Lrwopt].into_iter().enumerate() {
        let mut s = spec(v, recipe.clone(), &root.join("a"), vec![1, 2]);
        s.train = TrainConfig { max_epochs: 10, warm_start_epochs: 3, ..TrainConfig::default() };
        let mut again = s.clone();
        again.outdir = root.join("b");
        // The second run is serial, so thread scheduling cannot matter either.
        if let Err(e) = experiment::run(&s, true).and_then(|_| experiment::run(&again, k == 0)) {
            return outcome(10, "byte-identical reruns", false, format!("{} run failed: {e}", v.name()));
        }
        let (da, db) = (s.variant_dir(), again.variant_dir());
        let (fa, fb) = (files_under(&da), files_under(&db));
        if fa != fb {
            mismatched.push(format!("{} file sets differ", v.name()));
            continue;
        }
        for f in fa {
            let (a, b) = (fs::read(da.join(&f)).unwrap(), fs::read(db.join(&f)).unwrap());
            let same = if f.file_name().unwrap() == "config.toml" {
                // The echo records the output directory, which is the one thing that differs.
                String::from_utf8_lossy(&a).replace(&*root.join("a").to_string_lossy(), "")
                    == String::from_utf8_lossy(&b).replace(&*root.join("b").to_string_lossy(), "")
            } else {
                a == b
            };
            compared += 1;
            if !same {
                mismatched.push(format!("{}/{}", v.name(), f.display()));
            }
        }
    }
    outcome(
        10,
        "byte-identical reruns",
        compared > 0 && mismatched.is_empty(),
        format!("{compared} artifacts compared across erm, lrw_hard, lrwopt; mismatches: {}", if mismatched.is_empty() { "none".into() } else { mismatched.join(", ") }),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Vec<Outcome>| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        for o in out {
            println!(
                "criterion {:>2} {}: {} ({}) [{secs:.1}s]",
                o.id,
                o.name,
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push(o.pass);
        }
    };
    timed(&mut || vec![criterion_1()]);
    timed(&mut || vec![criterion_2()]);
    timed(&mut || vec![criterion_3()]);
    timed(&mut || criteria_4_to_7(&root.path().join("bench")));
    timed(&mut || vec![criterion_8()]);
    timed(&mut || vec![criterion_9(&root.path().join("skew"))]);
    timed(&mut || vec![criterion_10(&root.path().join("determinism"))]);
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
