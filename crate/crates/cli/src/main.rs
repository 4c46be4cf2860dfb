//! `gst`: prepare windows, train, evaluate, predict, simulate scenarios and
//! report dataset statistics.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 configuration/checkpoint
//! mismatch, 5 numerical failure.

mod commands;
mod failure;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gst_core::SamplingMode;

use crate::failure::Failure;
use crate::settings::{Settings, VariantFlags};

#[derive(Parser, Debug)]
#[command(
    name = "gst",
    version,
    about = "Sparse-graph pedestrian trajectory prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut scenes into windows, split them, and write a window cache per scene.
    Prepare(Common),
    /// Train one model per scene.
    Train(TrainArgs),
    /// Score a checkpoint on a scene's test windows.
    Evaluate(Common),
    /// Write the rollout for one test window.
    Predict(Common),
    /// Run the scripted human-robot scenarios through a checkpoint.
    Simulate(Common),
    /// Window counts and the share of partially observed pedestrians.
    Stats(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML settings file, for example a `run.toml` written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene name from the data manifest, `all`, or `synthetic`.
    #[arg(long)]
    scene: Option<String>,
    /// Data manifest; defaults to `$GST_DATA_ROOT/manifest.toml`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Window cache written by `prepare`, used instead of the manifest.
    #[arg(long)]
    windows: Option<PathBuf>,
    /// Frames between consecutive window starts.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Configuration ID, 1 to 8.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    config_id: Option<u8>,
    /// Take partially observed pedestrians as input.
    #[arg(long, overrides_with = "no_partial")]
    partial: bool,
    #[arg(long)]
    no_partial: bool,
    /// Use the edge selector.
    #[arg(long, overrides_with = "no_sparsity")]
    sparsity: bool,
    #[arg(long)]
    no_sparsity: bool,
    /// Neighbor cap of the edge selector.
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<SamplingMode>,
    /// Selector temperature for prediction.
    #[arg(long)]
    tau: Option<f64>,
    /// Stochastic rollouts (evaluate) or seeds (simulate).
    #[arg(long)]
    rollouts: Option<usize>,
    /// Test-window index for `predict`.
    #[arg(long)]
    window: Option<usize>,
    /// Scenario name or `all`; repeatable.
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Disable random-rotation augmentation.
    #[arg(long)]
    no_augment: bool,
}

impl Common {
    fn variant_flags(&self) -> VariantFlags {
        let pick = |on: bool, off: bool| match (on, off) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        };
        VariantFlags {
            config_id: self.config_id,
            partial: pick(self.partial, self.no_partial),
            sparsity: pick(self.sparsity, self.no_sparsity),
            neighbors: self.neighbors,
        }
    }

    /// Defaults, then `--config`, then the flags. `seed` and `mode` go to
    /// the training config for `train` and to prediction otherwise.
    fn resolve(&self, command: &str) -> Result<(Settings, VariantFlags), Failure> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        s.command = command.to_string();
        if let Some(v) = &self.scene {
            s.scene = v.clone();
        }
        if let Some(v) = &self.manifest {
            s.data_manifest = Some(v.clone());
        }
        if let Some(v) = &self.windows {
            s.windows = Some(v.clone());
        }
        if let Some(v) = self.stride {
            s.stride = v;
        }
        if let Some(v) = &self.out_dir {
            s.out_dir = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            s.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.rollouts {
            s.rollouts = v;
        }
        if let Some(v) = self.tau {
            s.tau = v;
        }
        if let Some(v) = self.window {
            s.window = v;
        }
        if !self.scenarios.is_empty() {
            s.scenarios = self.scenarios.clone();
        }
        let training = command == "train";
        if let Some(v) = self.seed {
            if training {
                s.train.seed = v;
            } else {
                s.seed = v;
            }
        }
        if let Some(v) = self.mode {
            if training {
                s.train.mode = v;
            } else {
                s.mode = v;
            }
        }
        if s.stride == 0 {
            return Err(Failure::usage("--stride must be at least 1"));
        }
        Ok((s, self.variant_flags()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare(c) => {
            let (s, _) = c.resolve("prepare")?;
            commands::prepare(s)
        }
        Command::Train(t) => {
            let (mut s, flags) = t.common.resolve("train")?;
            if let Some(v) = t.epochs {
                s.train.epochs = v;
            }
            if let Some(v) = t.batch_size {
                s.train.batch_size = v;
            }
            if let Some(v) = t.learning_rate {
                s.train.learning_rate = v;
            }
            if t.no_augment {
                s.train.augment = false;
            }
            commands::train(s, flags)
        }
        Command::Evaluate(c) => {
            let (s, flags) = c.resolve("evaluate")?;
            commands::evaluate(s, flags)
        }
        Command::Predict(c) => {
            let (s, flags) = c.resolve("predict")?;
            commands::predict(s, flags)
        }
        Command::Simulate(c) => {
            let (s, flags) = c.resolve("simulate")?;
            commands::simulate(s, flags)
        }
        Command::Stats(c) => {
            let (s, _) = c.resolve("stats")?;
            commands::stats(s)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { failure::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
