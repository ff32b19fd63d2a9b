use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "ircam", version, about = "Train, evaluate and inspect IRCAM audio-visual navigation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write checkpoints, metrics and a config snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, applied after the file is read.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on held-out worlds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "heard")]
        split: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulator and evaluation settings; defaults match the network.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Add random and greedy audio-follower rows.
        #[arg(long)]
        baselines: bool,
        /// Write the results table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the IRCAM trajectories here as JSON lines.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Train the full model and the three ablations under identical budgets.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Run one episode and dump every decoder attention map.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Stop after this many steps even if the episode is still running.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Print the world generated from a seed as a text grid.
    World {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides, force } => commands::train(&config, &overrides, force),
        Command::Eval { checkpoint, split, episodes, seed, config, overrides, baselines, out, trajectories } => {
            commands::eval(commands::EvalArgs {
                checkpoint,
                split,
                episodes,
                seed,
                config,
                overrides,
                baselines,
                out,
                trajectories,
            })
        }
        Command::Ablate { config, overrides, force } => commands::ablate(&config, &overrides, force),
        Command::ExportAttn { checkpoint, world_seed, out_dir, config, overrides, max_steps } => {
            commands::export_attn(&checkpoint, world_seed, &out_dir, config.as_deref(), &overrides, max_steps)
        }
        Command::World { seed, config, overrides } => commands::world(seed, config.as_deref(), &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
