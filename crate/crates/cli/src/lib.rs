//! Config-driven experiments over the flowlab sampler. Every command writes a
//! CSV artifact whose header records the config hash, seed and resolved config.

pub mod commands;
pub mod config;
pub mod error;
pub mod fit;
pub mod output;

use std::path::{Path, PathBuf};

pub use commands::{run, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::CliError;

/// Everything the binary needs besides the thread count.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub gnuplot_script: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub csv: String,
    /// Where the CSV was written; `None` means the caller prints it.
    pub path: Option<PathBuf>,
    pub failures: Vec<String>,
}

/// Loads and resolves the config, runs the command and writes the artifacts.
///
/// Check failures are returned inside the artifact so that the CSV is still
/// written; validation and numerical errors abort before any output.
pub fn execute(inv: &Invocation) -> Result<Artifact, CliError> {
    let mut cfg = ExperimentConfig::load(&inv.config)?;
    if let Some(seed) = inv.seed {
        cfg.run.seed = seed;
    }
    let path = inv.out.clone().or_else(|| cfg.run.output_path.clone());
    if inv.gnuplot_script && path.is_none() {
        return Err(CliError::Validation("--gnuplot-script needs --out or run.output_path".into()));
    }
    let outcome = run(inv.command, &cfg)?;
    let csv = output::render_csv(inv.command.name(), &cfg, &outcome.table)?;
    if let Some(p) = &path {
        write_file(p, &csv)?;
        if inv.gnuplot_script {
            let script = output::gnuplot_script(p, inv.command.name(), &outcome.table, inv.command.plot());
            write_file(&p.with_extension("gp"), &script)?;
        }
    }
    Ok(Artifact {
        csv,
        path,
        failures: outcome.failures,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
