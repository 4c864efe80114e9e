//! `wrinkle`: dataset generation, baking, training, sampling and evaluation
//! of displacement-texture garment models.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load, Common};

#[derive(Parser)]
#[command(name = "wrinkle", version, about = "Garment wrinkle diffusion in displacement-texture space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a procedural (and optionally ingested) dataset.
    DatasetGen(Common),
    /// Bake a posed garment OBJ into a displacement texture.
    Bake(Common),
    /// Turn a displacement texture back into a posed garment OBJ.
    Reconstruct(Common),
    /// Train the per-frame model.
    Train(Common),
    /// Train the model conditioned on the previous frame.
    TrainTemporal(Common),
    /// Sample textures for a list of conditions.
    Sample(Common),
    /// Sample a whole dataset sequence frame by frame.
    Rollout(Common),
    /// Position and velocity error curves against the ground truth.
    Eval(Common),
    /// Write RGB previews of displacement textures.
    ExportPng(Common),
}

fn run(cmd: Command) -> anyhow::Result<()> {
    use commands::*;
    match cmd {
        Command::DatasetGen(c) => dataset_gen(load(&c, "dataset.seed")?),
        Command::Bake(c) => bake_cmd(load(&c, "seed")?),
        Command::Reconstruct(c) => reconstruct_cmd(load(&c, "seed")?),
        Command::Train(c) => train_cmd(load(&c, "seed")?),
        Command::TrainTemporal(c) => train_temporal_cmd(load(&c, "seed")?),
        Command::Sample(c) => sample_cmd(load(&c, "seed")?),
        Command::Rollout(c) => rollout_cmd(load(&c, "seed")?),
        Command::Eval(c) => eval_cmd(load(&c, "seed")?),
        Command::ExportPng(c) => export_png_cmd(load(&c, "seed")?),
    }
}

/// 1 for problems with the input, 2 for failures of the run itself.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<wrinkle_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
