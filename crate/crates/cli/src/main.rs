//! `imbopt`: dataset generation, training runs and bound batteries.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "imbopt", about = "Per-class normalized training on imbalanced data", version)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train every algorithm block of an experiment config for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; overrides `seeds` in the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Run a bound battery (or `all`) and write its report CSV.
    Theory {
        #[arg(long)]
        battery: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Optional JSON file with battery settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write the train/test CSVs and a manifest for a dataset config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Print the tool and config schema versions.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_pool() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let quiet = cli.quiet;
    let res = match cli.cmd {
        Cmd::Run { config, out, seeds } => commands::run(&config, out, seeds.as_deref(), quiet),
        Cmd::Theory {
            battery,
            out,
            config,
            seeds,
        } => commands::theory(&battery, &out, config.as_deref(), seeds.as_deref(), quiet),
        Cmd::GenData { config, out, seeds } => commands::gen_data(&config, &out, seeds.as_deref(), quiet),
        Cmd::Version => {
            println!(
                "imbopt {} (config schema {})",
                env!("CARGO_PKG_VERSION"),
                config::SCHEMA_VERSION
            );
            Ok(commands::Outcome::Clean)
        }
    };
    match res {
        Ok(commands::Outcome::Clean) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Violations(n)) => {
            eprintln!("{n} violation(s)");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
