//! `dmil`: generate synthetic land-cover data, tune, train, evaluate and
//! report weakly supervised segmentation models.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmil::train::{ModelKind, TuneSplit};
use dmil::{Error, Result};

use commands::ExperimentSpec;

#[derive(Parser)]
#[command(
    name = "dmil",
    version,
    about = "Weakly supervised land-cover segmentation from coarse labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Scene generator config (JSON); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config override `key=value`; nested keys use dots.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Random search over learning rate, weight decay, beta and r.
    Tune {
        #[arg(long)]
        data: PathBuf,
        /// Model kinds, comma separated, or `all`.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value = "holdout20")]
        tune_split: TuneSplit,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base training config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Search space (JSON).
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Trials run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train replicates of a tuned config and keep the median one.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        /// Must match the split used for tuning; `holdout20` trains on the
        /// remaining 80% of the training tiles.
        #[arg(long, default_value = "holdout20")]
        tune_split: TuneSplit,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on HR reference maps.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Patches written as PPM rasters.
        #[arg(long, default_value_t = 16)]
        patches: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Merge evaluations into a summary table and charts.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_kinds(s: &str) -> Result<Vec<ModelKind>> {
    if s == "all" {
        return Ok(ModelKind::ALL.to_vec());
    }
    let mut kinds = s
        .split(',')
        .map(|k| k.trim().parse())
        .collect::<Result<Vec<ModelKind>>>()?;
    kinds.dedup();
    Ok(kinds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            overrides,
            force,
        } => commands::gen_data(config.as_deref(), &overrides, &out, seed, force),
        Command::Tune {
            data,
            kind,
            trials,
            tune_split,
            seed,
            out,
            config,
            space,
            overrides,
            jobs,
            force,
        } => {
            let spec = ExperimentSpec {
                data,
                kinds: parse_kinds(&kind)?,
                trials,
                seed,
                out,
                overrides,
            };
            commands::tune(
                &spec,
                tune_split,
                config.as_deref(),
                space.as_deref(),
                jobs,
                force,
            )
        }
        Command::Train {
            data,
            config,
            replicates,
            tune_split,
            out,
            overrides,
            jobs,
            force,
        } => commands::train(
            &data, &config, &overrides, replicates, tune_split, &out, jobs, force,
        ),
        Command::Eval {
            data,
            checkpoint,
            split,
            patches,
            out,
            force,
        } => commands::eval(&data, &checkpoint, &split, patches, &out, force),
        Command::Report { input, out, force } => commands::report(&input, &out, force),
    }
}

/// 2: configuration, 3: data or missing artifact, 4: divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::MissingArtifact { .. } | Error::Io { .. } | Error::Json(_) => 3,
        Error::Diverged { .. }
        | Error::SearchExhausted { .. }
        | Error::NonFiniteGradient { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
