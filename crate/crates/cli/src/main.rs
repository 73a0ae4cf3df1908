use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrw_core::datagen::save_csv;
use lrw_core::dro_oracle::TieBreak;
use lrw_core::experiment::{self, AggregateReport, DatasetRecipe, ExitKind, ExperimentSpec, OracleSpec, RunOutcome};
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "lrw", version, about = "Learned reweighting with optimized validation splits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a dataset recipe for one seed as CSV files.
    GenData(GenDataArgs),
    /// Run an experiment spec over its seed list.
    Run(RunArgs),
    /// Compare aggregate reports of several variants.
    Compare(CompareArgs),
    /// Evaluate the finite-class oracles on an instance file.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// TOML experiment spec; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset field, dotted key, e.g. `source.kind=two_moons` or `noise.rate=0.2`.
    #[arg(long = "dataset", value_name = "KEY=VALUE")]
    dataset: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Run seed the dataset is materialized for.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    erm_epochs: Option<usize>,
    /// Training field, e.g. `max_epochs=20` or `classifier_hidden=[32,32]`.
    #[arg(long = "train", value_name = "KEY=VALUE")]
    train: Vec<String>,
    /// Oracle instance file (variant `oracle`).
    #[arg(long)]
    oracle_instance: Option<PathBuf>,
    /// Run seeds on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// `aggregate.json` files or the variant directories holding them.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Directory for `comparison.json` and `gains.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    grid: Vec<u32>,
    #[arg(long, value_enum, default_value = "first-listed")]
    tie_break: TieArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TieArg {
    FirstListed,
    ValidationOptimal,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
fn set_dotted(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got `{assignment}`"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn load_table(config: Option<&Path>) -> Result<Table> {
    match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(lrw_core::Error::from).with_context(|| format!("reading {}", p.display()))?;
            Ok(toml::from_str(&text).map_err(lrw_core::Error::from)?)
        }
        None => Ok(Table::new()),
    }
}

fn apply_dataset_flags(table: &mut Table, flags: &[String]) -> Result<()> {
    for f in flags {
        set_dotted(table, &format!("dataset.{f}"))?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut t = load_table(a.spec.config.as_deref())?;
    apply_dataset_flags(&mut t, &a.spec.dataset)?;
    let recipe = t.remove("dataset").ok_or_else(|| lrw_core::Error::Invalid("dataset: no recipe given".into()))?;
    let recipe: DatasetRecipe = recipe.try_into().map_err(lrw_core::Error::from)?;
    let m = recipe.materialize(a.seed)?;
    fs::create_dir_all(&a.out).map_err(lrw_core::Error::from)?;
    save_csv(&m.pool, a.out.join("train.csv"))?;
    save_csv(&m.clean_pool, a.out.join("train_clean.csv"))?;
    save_csv(&m.test, a.out.join("test.csv"))?;
    println!("wrote {} train and {} test rows to {}", m.pool.len(), m.test.len(), a.out.display());
    Ok(())
}

fn build_spec(a: &RunArgs) -> Result<ExperimentSpec> {
    let mut t = load_table(a.spec.config.as_deref())?;
    apply_dataset_flags(&mut t, &a.spec.dataset)?;
    if let Some(v) = &a.variant {
        t.insert("variant".into(), Value::String(v.clone()));
    }
    if let Some(s) = &a.seeds {
        t.insert("seeds".into(), Value::Array(s.iter().map(|&x| Value::Integer(x as i64)).collect()));
    }
    if let Some(o) = &a.outdir {
        t.insert("outdir".into(), Value::String(o.display().to_string()));
    }
    if let Some(e) = a.erm_epochs {
        t.insert("erm_epochs".into(), Value::Integer(e as i64));
    }
    for f in &a.train {
        set_dotted(&mut t, &format!("train.{f}"))?;
    }
    if let Some(p) = &a.oracle_instance {
        set_dotted(&mut t, &format!("oracle.instance=\"{}\"", p.display()))?;
    }
    t.entry("seeds").or_insert_with(|| Value::Array(vec![]));
    let spec: ExperimentSpec = Value::Table(t).try_into().map_err(lrw_core::Error::from)?;
    spec.validate()?;
    Ok(spec)
}

fn run(a: RunArgs) -> Result<()> {
    let spec = build_spec(&a)?;
    match experiment::run(&spec, a.parallel)? {
        RunOutcome::Models { aggregate, per_seed } => {
            for r in &per_seed {
                let frac = r.val_fraction.map(|f| format!("  val_fraction {f:.3}")).unwrap_or_default();
                println!("seed {:>4}  accuracy {:.4}  erm {:.4}{frac}", r.seed, r.metrics.test_accuracy, r.reference_accuracy);
            }
            let m = &aggregate.metrics;
            println!(
                "{}: mean accuracy {:.4} over {} seeds; margin delta vs erm mean {:.4} median {:.4}",
                spec.variant.name(),
                m.test_accuracy,
                m.seeds_aggregated,
                m.delta_mean.unwrap_or(0.0),
                m.delta_median.unwrap_or(0.0)
            );
            println!("reports in {}", spec.variant_dir().display());
        }
        RunOutcome::Oracle(r) => print_oracle(&r),
    }
    Ok(())
}

fn print_oracle(r: &experiment::OracleReport) {
    println!(
        "dual_dro {}  trilevel {}  dro {}  |S'| = {}  argmax {:?}",
        r.dual_dro_value, r.trilevel_value, r.dro_value, r.subset_size, r.argmax_subset
    );
    println!("equality {}  weak duality {}", verdict(r.equality_holds), verdict(r.weak_duality_holds));
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "fails"
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("aggregate.json") } else { p.clone() };
            AggregateReport::load(&file).with_context(|| format!("loading {}", file.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = experiment::compare(&reports)?;
    println!("{:<12} {:>9} {:>12} {:>10} {:>10}", "variant", "accuracy", "gain (pts)", "d_mean", "d_median");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for g in &c.gains {
        println!(
            "{:<12} {:>9.4} {:>12.2} {:>10} {:>10}",
            g.variant.name(),
            g.mean_accuracy,
            g.gain_points,
            opt(g.delta_mean),
            opt(g.delta_median)
        );
    }
    if let Some(o) = &c.ordering {
        println!(
            "ordering easy < random < hard: {:?} (hard>random {}/{}, random>easy {}/{})",
            o.verdict, o.hard_over_random_wins, o.n_seeds, o.random_over_easy_wins, o.n_seeds
        );
    }
    if let Some(dir) = &a.out {
        experiment::write_comparison(&c, dir)?;
    }
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let tie_break = match a.tie_break {
        TieArg::FirstListed => TieBreak::FirstListed,
        TieArg::ValidationOptimal => TieBreak::ValidationOptimal,
    };
    let r = experiment::run_oracle(&OracleSpec { instance: a.instance, weight_grid: a.grid, tie_break }, &a.out)?;
    print_oracle(&r);
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<lrw_core::Error>() {
            return ExitKind::from(err).code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitKind::Io.code() as u8;
        }
    }
    ExitKind::Validation.code() as u8
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Oracle(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
