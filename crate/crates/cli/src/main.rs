//! `trace`: generate synthetic data, train, evaluate, sweep operator grids
//! and check gradients.
//!
//! Exit codes: 0 success, 2 usage, 3 data/format, 4 numerical failure.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use trace_core::data::{self, Dataset, Split, SynthSpec, MANIFEST_FILE};
use trace_core::eval::{evaluate_split, SplitMode};
use trace_core::experiment::{ablate, default_threads, parse_grid};
use trace_core::gradsuite::{self, TOLERANCE};
use trace_core::tensor::Fault;
use trace_core::train::{train, write_metrics_file};
use trace_core::{checkpoint, Config, Error, Model};

#[derive(Parser)]
#[command(name = "trace", version, about = "Text-conditioned image retrieval on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest + TNSR images).
    GenData(GenData),
    /// Train a model and write a checkpoint and metrics.csv.
    Train(TrainArgs),
    /// Score a checkpoint on the val and test subsets.
    Eval(EvalArgs),
    /// Train every cell of an operator grid and rank the cells by R@10.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenData {
    /// JSON generator spec; omitted keys take their defaults.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing dataset in `--out`.
    #[arg(long)]
    force: bool,
}

/// Config file plus command-line overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config (flat keys such as "hfa.kind"); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.lambda2=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; metrics.csv is written next to the parameters.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint's parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Gallery mode: `original` (whole catalog) or `val` (query and target images only).
    #[arg(long, default_value = "original", value_parser = parse_split)]
    split: SplitMode,
    #[arg(short = 'K', value_delimiter = ',', default_value = "1,10,50")]
    ks: Vec<usize>,
    /// Score only the first N queries of each subset.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write the rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated axes: enumerated keys (`hfa.kind`) or `key=a|b`.
    #[arg(long, default_value = "hfa.kind,vlc.kind")]
    grid: String,
    /// Seeds every cell is trained with; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(short = 'K', value_delimiter = ',', default_value = "1,10,50")]
    ks: Vec<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the tanh backward pass; the suite must then fail.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value_t = TOLERANCE)]
    tolerance: f64,
}

fn parse_split(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Fails with a usage error (rather than an I/O error) for a missing input.
fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Usage(format!("{what} `{}` does not exist", path.display())).into());
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(&dir.join(MANIFEST_FILE), "dataset manifest")?;
    Ok(Dataset::load(dir)?)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => {
                require(p, "config")?;
                Config::load(p)?
            }
            None => Config::default(),
        };
        for o in &self.overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            cfg.set(key.trim(), value)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(args: &GenData) -> Result<()> {
    require(&args.spec, "spec")?;
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: args.spec.clone(), msg: e.to_string() })?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.out.join(MANIFEST_FILE).exists() && !args.force {
        return Err(Error::Usage(format!(
            "`{}` already holds a dataset; pass --force to overwrite",
            args.out.display()
        ))
        .into());
    }
    let manifest = data::generate(&spec, &args.out)?;
    println!(
        "wrote {}: {} images, {} train triplets, {} val / {} test queries",
        args.out.display(),
        manifest.images.len(),
        manifest.train.len(),
        manifest.val.queries.len(),
        manifest.test.queries.len()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ds = load_dataset(&args.data)?;
    let spec = ds.spec();
    let model = Model::new(&cfg, spec.image_size, spec.vocab)?;
    let (store, start_step) = match &args.resume {
        Some(dir) => {
            require(&dir.join(checkpoint::CHECKPOINT_MANIFEST), "checkpoint")?;
            let ck = checkpoint::load(dir)?;
            ck.ensure_resumable(&cfg)?;
            ck.model()?;
            (ck.store, ck.manifest.step)
        }
        None => (model.init_params(cfg.seed), 0),
    };
    let outcome = train(&cfg, &model, &ds, store)?;
    let step = start_step + outcome.steps;
    checkpoint::save(&args.out, &cfg, &model, &outcome.store, step)?;
    write_metrics_file(&args.out.join("metrics.csv"), &outcome.records)?;
    match outcome.records.last() {
        Some(r) => println!(
            "trained {} steps → {}; last eval: L_total {:.4}, R@1 {:.2}, R@10 {:.2}, R@50 {:.2}",
            outcome.steps,
            args.out.display(),
            r.l_total,
            r.r1,
            r.r10,
            r.r50
        ),
        None => println!("trained {} steps → {}", outcome.steps, args.out.display()),
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    require(&args.checkpoint.join(checkpoint::CHECKPOINT_MANIFEST), "checkpoint")?;
    let ck = checkpoint::load(&args.checkpoint)?;
    let model = ck.model()?;
    let ds = load_dataset(&args.data)?;
    let (want, have) = (model.image_size(), ds.spec().image_size);
    if want != have || ds.spec().vocab > model.vocab {
        return Err(Error::Format {
            path: args.data.clone(),
            msg: format!(
                "dataset ({have:?} images, vocab {}) does not fit the checkpoint ({want:?}, vocab {})",
                ds.spec().vocab,
                model.vocab
            ),
        }
        .into());
    }
    let rows = [Split::Val, Split::Test]
        .into_iter()
        .map(|s| evaluate_split(&model, &ck.store, &ds, s, args.split, &args.ks, args.limit))
        .collect::<trace_core::Result<Vec<_>>>()?;
    print!("{}", report::recall_table(&rows));
    if let Some(path) = &args.csv {
        report::write_recall_csv(path, &rows)?;
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let axes = parse_grid(&args.grid)?;
    let ds = load_dataset(&args.data)?;
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
    let threads = args.threads.unwrap_or_else(default_threads).max(1);
    let cells = ablate(&cfg, &ds, &axes, &seeds, &args.ks, threads)?;
    print!("{}", report::ablation_table(&cells, &args.ks));
    if let Some(path) = &args.csv {
        report::write_ablation_csv(path, &cells, &args.ks)?;
    }
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> Result<()> {
    let fault = args.inject_fault.then_some(Fault::TanhBackward);
    let suite = gradsuite::run(args.seed, fault)?;
    print!("{}", report::gradient_table(&suite, args.tolerance));
    if !suite.passes(args.tolerance) {
        return Err(Error::Numerical(format!(
            "{} gradient case(s) exceed relative error {:.0e}",
            suite.failures(args.tolerance).len(),
            args.tolerance
        ))
        .into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Parameter(_)) => 2,
        Some(Error::Numerical(_) | Error::Degenerate(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
