use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowlab_cli::{execute, CliError, Command, Invocation};

#[derive(Debug, Parser)]
#[command(name = "flowlab", version, about = "Probability-flow sampler experiments over Gaussian mixtures")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// CSV destination; defaults to run.output_path, else stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long, global = true)]
    gnuplot_script: bool,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Check the learning-rate properties of the schedule.
    ScheduleCheck,
    /// Sample a batch and estimate TV(q_1, p_1) plus the score errors.
    Tv,
    /// Run `tv` over the [scan] values and fit the log-log slope.
    Scan {
        /// Fill the runtime_seconds column (machine-dependent output).
        #[arg(long)]
        timings: bool,
    },
    /// Floor-lattice score perturbation against the exact field.
    Counterexample,
    /// Jacobian identity, covariance and Frobenius sums, posterior moments, localization and terminal KL.
    TheoryChecks,
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
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("flowlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let config = cli
        .config
        .ok_or_else(|| CliError::Validation("--config PATH is required".into()))?;
    let command = match cli.command {
        Sub::ScheduleCheck => Command::ScheduleCheck,
        Sub::Tv => Command::Tv,
        Sub::Scan { timings } => Command::Scan { timings },
        Sub::Counterexample => Command::Counterexample,
        Sub::TheoryChecks => Command::TheoryChecks,
    };
    let artifact = execute(&Invocation {
        command,
        config,
        seed: cli.seed,
        out: cli.out,
        gnuplot_script: cli.gnuplot_script,
    })?;
    if artifact.path.is_none() {
        print!("{}", artifact.csv);
    }
    if artifact.failures.is_empty() {
        Ok(0)
    } else {
        for f in &artifact.failures {
            eprintln!("FAIL {f}");
        }
        Ok(CliError::CheckFailed(String::new()).exit_code() as u8)
    }
}
