use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bdtrace::cli::{exit_code, run, write_metadata, Experiment, Overrides};
use bdtrace::config::ExperimentConfig;

/// Birth-death chains as traces of Feller Brownian motions.
#[derive(Parser)]
#[command(name = "bdtrace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scale, speed and boundary class of the matrix.
    Classify(Common),
    /// Analytic chain and Brownian resolvents with residual checks.
    Resolvent(Common),
    /// Sample paths of the Feller Brownian motion.
    Simulate(Common),
    /// Trace chains of simulated paths.
    Trace(Common),
    /// Simulated trace resolvent against the analytic one.
    CrossValidate(Common),
    /// Instantaneous laws, their recursion and the discarded-time diagnostic.
    Approx(Common),
    /// Boundary parameters recovered from simulated instantaneous laws.
    Recover(Common),
    /// Time change applied before the composition.
    DemoWrongOrder(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulated paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, common) = match cli.command {
        Command::Classify(c) => (Experiment::Classify, c),
        Command::Resolvent(c) => (Experiment::Resolvent, c),
        Command::Simulate(c) => (Experiment::Simulate, c),
        Command::Trace(c) => (Experiment::Trace, c),
        Command::CrossValidate(c) => (Experiment::CrossValidate, c),
        Command::Approx(c) => (Experiment::Approx, c),
        Command::Recover(c) => (Experiment::Recover, c),
        Command::DemoWrongOrder(c) => (Experiment::DemoWrongOrder, c),
    };
    let mut cfg = match &common.config {
        Some(p) => match ExperimentConfig::from_path(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::from_toml_str("").expect("defaults are valid"),
    };
    Overrides {
        seed: common.seed,
        paths: common.paths,
    }
    .apply(&mut cfg);
    let out_dir = common
        .out_dir
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(exp.name()));
    let result = run(exp, &cfg, &out_dir);
    match &result {
        Ok(o) => {
            print!("{}", o.stdout);
            for c in &o.checks {
                eprintln!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            let threads = cfg.threads.unwrap_or_else(bdtrace::rng::default_threads);
            if let Err(e) = write_metadata(exp, &cfg, &out_dir, threads) {
                eprintln!("warning: {e}");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result, cfg.enforce_checks) as u8)
}
