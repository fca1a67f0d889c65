use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prpo_core::envs::make_task_suite;
use prpo_core::harness::{
    compare_variants, format_checks, load_config, run_experiment, run_verification,
    ExperimentConfig,
};
use prpo_core::objective::AlgoKind;
use prpo_core::Error;

#[derive(Parser)]
#[command(name = "prpo", version, about = "GRPO / PRPO experiments on synthetic suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file; defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set algo.epsilon=0.1`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write its artifacts.
    Run(ConfigArgs),
    /// Train several variants on the same suite and seed.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants (grpo, reward-prpo, data-prpo, prpo).
        #[arg(long, value_delimiter = ',', default_value = "grpo,prpo")]
        variants: Vec<String>,
    },
    /// Run the oracle cross-checks and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Print the task suite a config resolves to.
    Suite(ConfigArgs),
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let base = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&args.overrides)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve(&args)?;
            let report = run_experiment(&cfg)?;
            println!(
                "{} steps written to {}",
                report.metrics.len(),
                report.output_dir.display()
            );
        }
        Command::Compare { config, variants } => {
            let cfg = resolve(&config)?;
            let kinds = variants
                .iter()
                .map(|v| {
                    AlgoKind::parse(v).ok_or_else(|| Error::Config(format!("unknown variant '{v}'")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let cmp = compare_variants(&cfg, &kinds)?;
            print!("{}", cmp.table());
            println!("comparison written to {}", cmp.csv_path.display());
        }
        Command::Verify { seed, cases } => {
            let checks = run_verification(seed, cases)?;
            print!("{}", format_checks(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::Invariant("oracle checks failed".into()));
            }
        }
        Command::Suite(args) => {
            let cfg = resolve(&args)?;
            let suite = make_task_suite(&cfg.suite_config())?;
            print!("{}", suite.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
