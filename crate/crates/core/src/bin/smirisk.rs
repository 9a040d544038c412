use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smirisk::cohort::CohortKind;
use smirisk::pipeline::{self, RunConfig};
use smirisk::{Error, Result};

#[derive(Parser)]
#[command(name = "smirisk", version = pipeline::VERSION, about = "SMI risk screening from coded clinical histories")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `out` key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population.
    Synth,
    /// Build the cohort and write cohort.csv.
    Cohort,
    /// Train and evaluate on one data source.
    Train,
    /// Score a dataset with a model trained on another source.
    CrossEval,
    /// Pretrain on one source, fine-tune on another.
    TwoStep,
    /// Fine-tune a base model on the AGE18 or SUBSTANCE cohort.
    UseCase,
    /// Evaluate the rule-based benchmarks only.
    Bench,
    /// Merge earlier report.json files.
    Report,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn print_rows(rows: &[pipeline::ReportRow]) {
    for r in rows {
        let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<6} {:<13} {:<6} {:<9} auc={auc} sens={:.4} spec={:.4} prev={:.4}",
            r.method, r.protocol, r.dataset, r.cohort, r.sensitivity, r.specificity, r.prevalence
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Synth => {
            let n = pipeline::run_synth(&cfg)?;
            println!("wrote {n} persons to {}", cfg.out.display());
        }
        Command::Cohort => {
            let c = pipeline::run_cohort(&cfg)?;
            println!(
                "{} cohort: {} examples, {} positives",
                c.kind, c.stats.examples, c.stats.positives
            );
        }
        Command::Train => print_rows(&pipeline::run_single_source(&cfg)?.rows),
        Command::CrossEval => print_rows(&pipeline::run_cross_eval(&cfg)?.rows),
        Command::TwoStep => print_rows(&pipeline::run_two_step(&cfg)?.rows),
        Command::UseCase => {
            if cfg.cohort_kind == CohortKind::AllAge {
                return Err(Error::Config("use-case needs cohort.kind=AGE18 or SUBSTANCE".into()));
            }
            print_rows(&pipeline::run_use_case(&cfg)?.rows)
        }
        Command::Bench => print_rows(&pipeline::run_bench(&cfg)?.rows),
        Command::Report => print_rows(&pipeline::run_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(Error::Config(format!("cannot start {} threads: {e}", cli.threads.unwrap_or(0)))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
