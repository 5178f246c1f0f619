use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedp3_cli::{run, CliError, Command, ExperimentConfig, LdpOverrides, RunOptions};

#[derive(Parser)]
#[command(
    name = "fedp3",
    version,
    about = "Federated pruning simulator and bound certification runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// TOML experiment config; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, replacing `train.seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Exit with status 4 when a certificate fails.
    #[arg(long, global = true)]
    fail_on_violation: bool,
}

#[derive(Subcommand)]
enum Sub {
    /// Federated training with layer-subset uploads.
    Fedp3,
    /// Sketched iterations on a quadratic with a convergence certificate.
    Ist,
    /// Distributed gradient descent baseline on a quadratic.
    Dgd,
    /// Locally private sketched training with a calibrated schedule.
    Ldp(LdpArgs),
    /// Run every certificate on the bundled instances.
    Verify,
    /// Per-layer parameter and communication table as CSV.
    Account,
}

#[derive(Args)]
struct LdpArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Samples per client.
    #[arg(long)]
    m: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Gradient clipping norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Noise calibration constant.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    seeds: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Fedp3 => Command::Fedp3,
        Sub::Ist => Command::Ist,
        Sub::Dgd => Command::Dgd,
        Sub::Ldp(a) => Command::Ldp(LdpOverrides {
            epsilon: a.epsilon,
            delta: a.delta,
            m: a.m,
            batch: a.batch,
            clip: a.clip,
            c: a.c,
            seeds: a.seeds,
        }),
        Sub::Verify => Command::Verify,
        Sub::Account => Command::Account,
    };
    let opts = RunOptions {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
        fail_on_violation: cli.fail_on_violation,
    };
    let result = cli
        .config
        .as_deref()
        .map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
        .and_then(|cfg| run(&command, cfg, &opts));
    match result {
        Ok(summary) => {
            print!("{}", summary.stdout);
            for v in &summary.violations {
                eprintln!("warning: {v}");
            }
            eprintln!(
                "wrote {} artifacts to {}",
                summary.manifest.artifacts.len() + 1,
                opts.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
