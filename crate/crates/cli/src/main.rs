use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regretlab::harness::bayes::{brute_force_bayes, random_env_determined_instance};
use regretlab::harness::constraints::select_columns;
use regretlab::harness::experiment::make_envs;
use regretlab::harness::report::{write_csv, write_sweep_csv};
use regretlab::{
    check_representation, evaluate, read_envs, read_report, run_experiment, sweep_shift_severity, train, write_envs, write_report,
    ConstraintOptions, DescriptorConfig, Error, ExperimentConfig, GeneratorConfig, Method, MethodSpec, PlayerSet, TrainConfig,
    TranslationConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "regretlab", version, about = "Train and compare invariant representation objectives on synthetic environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated dataset in the text format.
    Generate(Common),
    /// Train one method and save the selected checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on every environment of a dataset.
    Evaluate(EvalArgs),
    /// Run the constraint and Bayes checks.
    CheckProps(CheckArgs),
    /// Compare methods across shift severities.
    Sweep(SweepArgs),
    /// Run an experiment and write `report.toml` and `report.csv`.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Translation,
    Descriptor,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file in the report schema; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    generator: Option<GenKind>,
    /// Merge training environments into two.
    #[arg(long)]
    cluster: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "erm")]
    method: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Random discrete instances for the Bayes check.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

#[derive(Args)]
struct ExperimentFlags {
    #[command(flatten)]
    common: Common,
    /// Comma-separated methods, used when no config is given.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    #[arg(long)]
    no_refit: bool,
    /// Print the resolved experiment config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentFlags,
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Re-emit the CSV of an existing `report.toml` instead of running.
    #[arg(long)]
    from: Option<PathBuf>,
}

type CliResult = Result<(), Error>;

fn default_generator(kind: Option<GenKind>) -> GeneratorConfig {
    match kind.unwrap_or(GenKind::Translation) {
        GenKind::Translation => GeneratorConfig::Translation(TranslationConfig::reference()),
        GenKind::Descriptor => GeneratorConfig::Descriptor(DescriptorConfig::reference()),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn experiment_config(f: &ExperimentFlags) -> Result<ExperimentConfig, Error> {
    let c = &f.common;
    let mut cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => {
            let names = if f.methods.is_empty() { vec!["erm".to_string(), "rgm".to_string()] } else { f.methods.clone() };
            let methods = names
                .iter()
                .map(|n| Ok(MethodSpec::new(n.clone(), TrainConfig::new(Method::parse(n)?))))
                .collect::<Result<Vec<_>, Error>>()?;
            ExperimentConfig::new(default_generator(c.generator), methods, vec![0])
        }
    };
    if c.generator.is_some() {
        cfg.generator = default_generator(c.generator);
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if !f.seeds.is_empty() {
        cfg.seeds = f.seeds.clone();
    }
    cfg.cluster |= c.cluster;
    cfg.refit &= !f.no_refit;
    for m in &mut cfg.methods {
        if let Some(s) = f.steps {
            m.train.steps = s;
        }
        if !f.lambda_grid.is_empty() && m.train.objective.method != Method::Erm {
            m.lambda_grid = f.lambda_grid.clone();
        }
    }
    if let Some(o) = &c.out {
        cfg.output = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(cfg.output.clone().unwrap_or_else(|| "out".into()))
}

fn generator_from(c: &Common) -> Result<(GeneratorConfig, bool), Error> {
    match &c.config {
        Some(p) => {
            let cfg = load_config(p)?;
            let g = if c.generator.is_some() { default_generator(c.generator) } else { cfg.generator };
            Ok((g, cfg.cluster || c.cluster))
        }
        None => Ok((default_generator(c.generator), c.cluster)),
    }
}

fn generate(c: &Common) -> CliResult {
    let (g, cluster) = generator_from(c)?;
    let envs = make_envs(&g, c.seed.unwrap_or(0), cluster)?;
    match &c.out {
        Some(p) => {
            let file = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            write_envs(&envs, io::BufWriter::new(file)).map_err(|e| Error::io(p, e))
        }
        None => write_envs(&envs, io::stdout().lock()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn run_train(a: &TrainArgs) -> CliResult {
    let seed = a.common.seed.unwrap_or(0);
    let envs = match &a.data {
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| Error::io(p, e))?;
            read_envs(BufReader::new(file))?
        }
        None => {
            let (g, cluster) = generator_from(&a.common)?;
            make_envs(&g, seed, cluster)?
        }
    };
    let mut cfg = TrainConfig::new(Method::parse(&a.method)?);
    cfg.seed = seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lambda {
        cfg.objective.lambda = v;
    }
    if let Some(v) = a.lambda_g {
        cfg.objective.lambda_g = v;
    }
    if let Some(v) = a.alpha {
        cfg.objective.alpha = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = regretlab::trainer::LrSchedule::constant(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    let out = train(&envs, &cfg)?;
    let test = evaluate(&out.best, &envs.test)?;
    let path = a.common.out.clone().unwrap_or_else(|| PathBuf::from("checkpoint.bin"));
    out.best.save(&path)?;
    let rec = json!({
        "method": cfg.objective.method.name(),
        "best_step": out.best_step,
        "validation": out.best_val,
        "test": test,
        "aborted": out.aborted,
        "checkpoint": path.display().to_string(),
    });
    println!("{rec}");
    Ok(())
}

fn run_evaluate(a: &EvalArgs) -> CliResult {
    let players = PlayerSet::load(&a.checkpoint)?;
    let file = fs::File::open(&a.data).map_err(|e| Error::io(&a.data, e))?;
    let envs = read_envs(BufReader::new(file))?;
    let mut stdout = io::stdout().lock();
    let named = envs.train.iter().map(|e| ("train", e)).chain([("validation", &envs.validation), ("test", &envs.test)]);
    for (split, env) in named {
        let m = evaluate(&players, env)?;
        writeln!(stdout, "{}", json!({ "split": split, "env": env.id, "metrics": m })).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn check_props(a: &CheckArgs) -> CliResult {
    let envs = make_envs(&GeneratorConfig::Translation(TranslationConfig::reference()), a.seed, false)?;
    let opts = ConstraintOptions { tolerance: a.tolerance, seed: a.seed, ..ConstraintOptions::default() };
    let identity = check_representation(&envs, |x| x.clone(), &opts)?;
    let x2 = check_representation(&envs, |x| select_columns(x, &[1]), &opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst = 0.0f64;
    for _ in 0..a.instances {
        let inst = random_env_determined_instance(100, 2, 2, &mut rng);
        let phi: Vec<usize> = (0..100).collect();
        let r = brute_force_bayes(&inst, &phi)?;
        worst = r.gaps.iter().fold(worst, |m, g| m.max(g.abs()));
    }
    println!("{}", json!({ "constraints": { "identity": identity, "x2_projection": x2 }, "bayes": { "instances": a.instances, "max_gap": worst } }));
    Ok(())
}

fn print_config(cfg: &ExperimentConfig) -> CliResult {
    let text = toml::to_string(cfg).map_err(|e| Error::Parse(format!("config: {e}")))?;
    print!("{text}");
    Ok(())
}

fn sweep(a: &SweepArgs) -> CliResult {
    let cfg = experiment_config(&a.exp)?;
    if a.exp.dry_run {
        return print_config(&cfg);
    }
    let rows = sweep_shift_severity(&cfg, &a.levels)?;
    let dir = out_dir(&cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("sweep.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_sweep_csv(&rows, file)?;
    println!("{}", json!({ "sweep": path.display().to_string(), "rows": rows.len() }));
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult {
    if let Some(p) = &a.from {
        let r = read_report(p)?;
        return write_csv(&r, io::stdout().lock());
    }
    let cfg = experiment_config(&a.exp)?;
    if a.exp.dry_run {
        return print_config(&cfg);
    }
    let r = run_experiment(&cfg)?;
    let (t, c) = write_report(&r, &out_dir(&cfg))?;
    let aborted = r.cells.iter().filter(|c| c.aborted.is_some()).count();
    println!("{}", json!({ "report": t.display().to_string(), "csv": c.display().to_string(), "cells": r.cells.len(), "aborted": aborted }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::CheckProps(a) => check_props(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
