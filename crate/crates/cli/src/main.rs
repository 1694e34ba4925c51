#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod corpus;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pointgmm", version, about = "Hierarchical Gaussian mixtures for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a tree with hard EM, level by level.
    FitEm(commands::FitEm),
    /// Train the generative VAE.
    TrainVae(commands::TrainVae),
    /// Draw points from a tree or from a VAE prior sample.
    Sample(commands::Sample),
    /// Decode a linear path between two encoded clouds.
    Interpolate(commands::Interpolate),
    /// Train the registration network.
    TrainReg(commands::TrainReg),
    /// Align a source cloud to a target cloud.
    Register(commands::Register),
    /// Score a registration model on synthesized pairs.
    EvalReg(commands::EvalReg),
    /// Train one decoder variant and export its loss trace.
    Ablate(commands::Ablate),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pointgmm::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FitEm(c) => c.run(),
        Command::TrainVae(c) => c.run(),
        Command::Sample(c) => c.run(),
        Command::Interpolate(c) => c.run(),
        Command::TrainReg(c) => c.run(),
        Command::Register(c) => c.run(),
        Command::EvalReg(c) => c.run(),
        Command::Ablate(c) => c.run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
