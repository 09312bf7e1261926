//! `apcde`: batch frontend for training, evaluation, generation and
//! validation runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use apcde::error::ErrorCategory;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "apcde", version, about = "Conditional density estimation with augmented-posterior flows")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. `--set train.batch_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-sample conditional and marginal log densities and bits per dimension.
    Density {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        divisor: Option<f64>,
        /// `two` or `e`.
        #[arg(long)]
        log_base: Option<String>,
    },
    /// Latent coordinates split into the zP blocks and zN.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Argmax labels from the categorical head.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unconditional samples.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Responses with fixed zP and fresh zN, optionally over a covariate grid.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// zP blocks, comma-separated within a head and `;` between heads.
        #[arg(long, allow_hyphen_values = true)]
        fix_zp: Option<String>,
        /// Take zP from this row of `--data` instead.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Responses per zP.
        #[arg(long, default_value_t = 1)]
        j: usize,
        /// `lo:hi:count` covariate sweep through a linear-gaussian head.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Head swept by `--grid`; defaults to the first linear-gaussian head.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Regeneration agreement of an independent probe classifier.
    ValidateSdr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        probe_data: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long)]
        j: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Gaussian-mixture dataset.
    SynthData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        half_distance: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a checkpoint's loss trace as CSV.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Usage => {
                    eprintln!("run `apcde help` for usage");
                    1
                }
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            };
            ExitCode::from(code)
        }
    }
}
