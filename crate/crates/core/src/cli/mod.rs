//! The `cc2d` command line: argument parsing, artifact layout and manifests.
//!
//! Artifacts live under `--out`:
//!
//! | command        | writes                                                  |
//! |----------------|---------------------------------------------------------|
//! | `gen-data`     | `<data_dir>/{images,annotations,meta.json}`             |
//! | `train-ssl`    | `ssl/{encoders.ckpt,loss_curve.csv}`                    |
//! | `pseudo-label` | `pseudo_labels/{<id>.txt,confidence.csv}`               |
//! | `train-tpl`    | `tpl/{detector.ckpt,loss_curve.csv}`                    |
//! | `eval`         | `eval/<source>/{report.json,report.csv}`                |
//! | `viz`          | `viz/{image,level_<i>,fused}.png`                       |
//! | `sweep`        | `sweep/sweep.csv`                                       |
//!
//! Every artifact directory also gets a `manifest.json`.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{ssl_test_report, Manifest};
pub use config::{DecodeKind, EvalSource, RunConfig, SweepMode};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cc2d", version, about = "One-shot landmark detection pipeline")]
pub struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub set: Vec<String>,
    /// Root seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train the reference and patch encoders.
    TrainSsl,
    /// Decode pseudo-labels for the unlabeled images.
    PseudoLabel,
    /// Train the detector on the template and the pseudo-labels.
    TrainTpl,
    /// Score predictions against annotations.
    Eval,
    /// Dump similarity and fused maps as 8-bit PNGs.
    Viz,
    /// SSL training and evaluation over an α/β grid.
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSsl => "train-ssl",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainTpl => "train-tpl",
            Command::Eval => "eval",
            Command::Viz => "viz",
            Command::Sweep => "sweep",
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    commands::dispatch(cli.command, &config, &cli.out)
}

/// Entry point of the binary: runs the command and turns failures into a
/// single `error[category]: message` line on stderr and exit status 1.
pub fn main_with_exit() -> ! {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            std::process::exit(2);
        }
    };
    match execute(&cli) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            std::process::exit(1);
        }
    }
}
