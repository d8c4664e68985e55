use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rics::image::Mode;
use rics_cli::commands::{cmd_bounds, cmd_eval, cmd_gen_synthetic, cmd_montecarlo, parse_embedder, parse_range, MonteCarloParams};
use rics_cli::config::{ExperimentConfig, WORKERS_ENV};
use rics_cli::synthetic::{Family, SyntheticSpec};

#[derive(Parser)]
#[command(name = "rics", version, about = "Translation-robust inference by crop selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus (PPM files plus manifest.jsonl).
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, value_enum, default_value_t = Family::NoisePlusObject)]
        family: Family,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 224)]
        view: usize,
        #[arg(long, default_value_t = 9)]
        max_shift: usize,
    },
    /// Run an experiment config; flags override config keys.
    Eval(EvalArgs),
    /// Closed-form bound curves as CSV.
    Bounds {
        #[arg(long, default_value_t = 224)]
        n: u64,
        /// Crop sizes: `a..=b`, `a:b[:step]` or a comma list.
        #[arg(long, default_value = "1..=224")]
        k: String,
        #[arg(long, default_value = "0,1,3,5,9")]
        delta: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistical checks of argmax uniformity and crop agreement.
    Montecarlo(MonteCarloArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    crop_size: Option<usize>,
    /// Comma-separated shift sizes.
    #[arg(long, value_delimiter = ',')]
    shifts: Option<Vec<usize>>,
    /// Embedder spec as inline JSON.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    report_json: Option<PathBuf>,
    #[arg(long)]
    report_csv: Option<PathBuf>,
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[arg(long, default_value_t = 224)]
    n: u64,
    #[arg(long, default_value_t = 140)]
    k: u64,
    #[arg(long, default_value_t = 1)]
    delta: u64,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Simulate agreement with RandHash on noise instead of ideal sampling.
    #[arg(long)]
    rand_hash: bool,
    #[arg(long, default_value_t = 0.005)]
    tolerance: f64,
    #[arg(long, default_value_t = 40)]
    uniformity_n: usize,
    #[arg(long, default_value_t = 20)]
    uniformity_k: usize,
    #[arg(long, default_value_t = 100_000)]
    uniformity_trials: u64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    workers: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "realistic" => Ok(Mode::Realistic),
        "cyclic" => Ok(Mode::Cyclic),
        _ => Err(format!("unknown mode `{s}` (realistic | cyclic)")),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
        cfg.synthetic = None;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(k) = a.crop_size {
        cfg.crop_size = k;
    }
    if let Some(s) = a.shifts {
        cfg.shifts = s;
    }
    if let Some(e) = a.embedder {
        cfg.embedder = parse_embedder(&e)?;
    }
    cfg.report_json = a.report_json.or(cfg.report_json);
    cfg.report_csv = a.report_csv.or(cfg.report_csv);
    cfg.audit_jsonl = a.audit.or(cfg.audit_jsonl);
    let csv = cmd_eval(&cfg)?;
    if cfg.report_csv.is_none() {
        print!("{csv}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynthetic {
            out,
            classes,
            per_class,
            family,
            seed,
            size,
            view,
            max_shift,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                family,
                seed,
                size,
                view,
                max_shift,
            };
            let manifest = cmd_gen_synthetic(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Command::Eval(a) => eval(a)?,
        Command::Bounds { n, k, delta, out } => {
            let csv = cmd_bounds(n, &parse_range(&k)?, &parse_range(&delta)?)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("cannot write {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Montecarlo(a) => {
            let p = MonteCarloParams {
                n: a.n,
                k: a.k,
                delta: a.delta,
                trials: a.trials,
                rand_hash: a.rand_hash,
                tolerance: a.tolerance,
                uniformity_n: a.uniformity_n,
                uniformity_k: a.uniformity_k,
                uniformity_trials: a.uniformity_trials,
                alpha: a.alpha,
                seed: a.seed,
                workers: a.workers,
            };
            let summary = cmd_montecarlo(&p)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            return Ok(summary.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
