mod colors;
mod decompose;
mod error;
mod eval;
mod matching;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "patchmatch",
    version,
    about = "Dense correspondences between triangle meshes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the patch hierarchy of a mesh and export it as JSON.
    Decompose(decompose::DecomposeArgs),
    /// Optimize a correspondence between two meshes.
    Match(matching::MatchArgs),
    /// Score a predicted map against ground truth.
    Eval(eval::EvalArgs),
    /// Color a source mesh through a map to a normal-coded target.
    TransferColors(colors::TransferArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decompose(a) => decompose::run(a).map(|dir| println!("{}", dir.display())),
        Command::Match(a) => matching::run(a).map(|dirs| {
            for d in dirs {
                println!("{}", d.display());
            }
        }),
        Command::Eval(a) => {
            eval::run(a).map(|r| println!("{}", serde_json::to_string(&r).expect("report serializes")))
        }
        Command::TransferColors(a) => colors::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
