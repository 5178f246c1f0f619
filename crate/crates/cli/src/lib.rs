//! Config-driven experiment runner for the `fedp3_core` simulator.
//!
//! [`run`] validates a configuration, executes one subcommand and writes its
//! artifacts (CSV, `report.json`, the resolved `config.toml` and
//! `manifest.json`) atomically into the output directory.

use std::path::PathBuf;

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod output;

pub use config::ExperimentConfig;
pub use output::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Diverged(String),

    #[error("certificate violation: {0}")]
    Violation(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Violation(_) => 4,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }
}

impl From<fedp3_core::Error> for CliError {
    fn from(e: fedp3_core::Error) -> Self {
        use fedp3_core::Error as E;
        match e {
            E::Diverged { .. } => CliError::Diverged(e.to_string()),
            // bad parameter combinations surface from the core as argument errors
            E::InvalidArgument(_) | E::Shape { .. } => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

/// Command-line overrides for the `[privacy]` section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LdpOverrides {
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub m: Option<usize>,
    pub batch: Option<usize>,
    pub clip: Option<f64>,
    pub c: Option<f64>,
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Fedp3,
    Ist,
    Dgd,
    Ldp(LdpOverrides),
    Verify,
    Account,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fedp3 => "fedp3",
            Command::Ist => "ist",
            Command::Dgd => "dgd",
            Command::Ldp(_) => "ldp",
            Command::Verify => "verify",
            Command::Account => "account",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Replaces `train.seed`.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Turn failed certificates into [`CliError::Violation`].
    pub fail_on_violation: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            threads: None,
            fail_on_violation: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    /// Failed certificates and consistency checks; artifacts are written regardless.
    pub violations: Vec<String>,
    /// Human-readable result for standard output.
    pub stdout: String,
}

pub fn run(command: &Command, mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let summary = match opts.threads {
        None => commands::execute(command, &cfg, opts)?,
        Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Run(format!("cannot start {n} worker threads: {e}")))?
            .install(|| commands::execute(command, &cfg, opts))?,
    };
    if opts.fail_on_violation && !summary.violations.is_empty() {
        return Err(CliError::Violation(summary.violations.join("; ")));
    }
    Ok(summary)
}
