//! `snowkit`: synthesize marine snow, build paired datasets, train the
//! generator and the restoration network, denoise and score images.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

/// A usage or configuration problem; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const REPRODUCIBILITY: &str = "\
Settings are resolved as defaults, then the --config file (a JSON object of
flat dotted keys such as \"train.epochs\"), then --set overrides, then flags.
The effective settings are written to run_config.json in the output directory;
passing that file back with --config replays the run.

Every subcommand derives all randomness from --seed, so a fixed seed gives
identical outputs. --deterministic additionally runs on a single worker thread
and is recorded in the snapshot.";

#[derive(Parser)]
#[command(name = "snowkit", version, about = "Marine-snow synthesis and removal", after_help = REPRODUCIBILITY)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed for every random draw of the run [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on one worker thread and record the run as deterministic
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads [default: $SNOWKIT_THREADS, else all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON settings file of flat dotted keys
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set train.gamma=0.5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
    set: Vec<(String, Value)>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic snow patches from generator weights (procedural blobs without weights)
    #[command(after_help = REPRODUCIBILITY)]
    GenSnow(commands::GenSnowArgs),
    /// Degrade a directory of clean images into a split paired dataset
    #[command(after_help = REPRODUCIBILITY)]
    BuildDataset(commands::BuildDatasetArgs),
    /// Train the snow generator and critic
    #[command(after_help = REPRODUCIBILITY)]
    TrainGan(commands::TrainGanArgs),
    /// Train the restoration U-Net on a built dataset
    #[command(after_help = REPRODUCIBILITY)]
    TrainUnet(commands::TrainUnetArgs),
    /// Restore images with a median filter or trained U-Net weights
    #[command(after_help = REPRODUCIBILITY)]
    Denoise(commands::DenoiseArgs),
    /// Denoise with the classical filters (all of median3, median5, adaptive by default)
    #[command(after_help = REPRODUCIBILITY)]
    Baseline(commands::DenoiseArgs),
    /// Score candidate images against references and write a metrics CSV
    #[command(after_help = REPRODUCIBILITY)]
    Evaluate(commands::EvaluateArgs),
}

impl Global {
    fn layer(&self) -> Map<String, Value> {
        let mut m = Map::new();
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.into());
        }
        if self.deterministic {
            m.insert("deterministic".into(), true.into());
        }
        if let Some(t) = self.threads {
            m.insert("threads".into(), t.into());
        }
        m
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut layers = Vec::new();
    if let Some(path) = &cli.global.config {
        layers.push(config::read_file(path)?);
    }
    layers.push(cli.global.set.iter().cloned().collect());
    layers.push(cli.global.layer());
    match cli.command {
        Command::GenSnow(a) => commands::gen_snow(layers, a),
        Command::BuildDataset(a) => commands::build_dataset(layers, a),
        Command::TrainGan(a) => commands::train_gan(layers, a),
        Command::TrainUnet(a) => commands::train_unet(layers, a),
        Command::Denoise(a) => commands::denoise(layers, a, false),
        Command::Baseline(a) => commands::denoise(layers, a, true),
        Command::Evaluate(a) => commands::evaluate(layers, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("error: {u}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
