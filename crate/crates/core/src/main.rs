use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparse_oracle::cli::{self, exit, Experiment, DEFAULTS_HELP, SEED_ENV};

/// Sparse regularized least squares for feedforward networks, with experiments that
/// audit its prediction guarantees.
#[derive(Parser)]
#[command(name = "sparse-oracle", version, after_help = DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the estimator on synthetic teacher data.
    Train(RunArgs),
    /// Multistart estimates of the effective noise, both sparsity kinds.
    EffectiveNoise(RunArgs),
    /// Check the oracle inequality against the teacher with r from the noise oracle.
    VerifyOracle(RunArgs),
    /// Effective noise across sample sizes, with log-log slopes.
    RateSweep(RunArgs),
    /// Randomized check of the Lipschitz property of the inner stack.
    LipschitzAudit(RunArgs),
    /// Held-out risk against the generalization bound with a calibrated constant.
    Generalization(RunArgs),
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct RunArgs {
    /// JSON config; defaults are used for anything it leaves out.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for report.json and the CSV tables [default: out/<experiment>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, value_name = "N", default_value_t = 0)]
    jobs: usize,
    /// Overwrite existing report files.
    #[arg(long)]
    force: bool,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(exit::USAGE)
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (experiment, args) = match parsed.command {
        Command::Train(a) => (Experiment::Train, a),
        Command::EffectiveNoise(a) => (Experiment::EffectiveNoise, a),
        Command::VerifyOracle(a) => (Experiment::VerifyOracle, a),
        Command::RateSweep(a) => (Experiment::RateSweep, a),
        Command::LipschitzAudit(a) => (Experiment::LipschitzAudit, a),
        Command::Generalization(a) => (Experiment::Generalization, a),
    };

    let text = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => Some(t),
            Err(e) => return fail(format!("{}: {e}", path.display())),
        },
        None => None,
    };
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => match v.trim().parse::<u64>() {
            Ok(s) => Some(s),
            Err(_) => return fail(format!("{SEED_ENV} must be a nonnegative integer, got {v:?}")),
        },
        Err(_) => None,
    };
    let cfg = match cli::load_config(text.as_deref(), experiment, seed) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build() {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let report = match pool.install(|| cli::run_experiment(&cfg)) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let out = args.out.unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    match cli::write_report(&report, &out, args.force) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => return fail(e),
    }
    for (k, v) in &report.summary {
        println!("{k}: {v}");
    }
    if report.violation {
        eprintln!("violation: a certified bound or proven property failed; see {}", out.display());
        return ExitCode::from(exit::VIOLATION);
    }
    ExitCode::from(exit::SUCCESS)
}
