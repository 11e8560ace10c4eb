use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fame_cli::commands::{cmd_ablate, cmd_edit, cmd_eval, cmd_fixture, cmd_invert};
use fame_cli::config::RunFlags;
use fame_cli::error_kind;
use fame_core::region::Layout;

#[derive(Parser)]
#[command(name = "fame", version, about = "Fairness-aware attention-modulated video editing on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// DDIM-invert a clip and record its attention maps.
    Invert(RunFlags),
    /// Invert, then edit toward the debiased target prompt.
    Edit(RunFlags),
    /// Correction count and ratio over seeded trials.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        /// Protocol JSON: {"professions": [{"name", "target"}], "seeds": [..], "probe_label"}.
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Probe direction (FTEN vector); defaults to the seeded probe.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Cumulative module ablation over an α × λ × μ grid.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        /// Grid JSON: {"modules": ["+P", ...], "alpha": [..], "lambda": [..], "mu": [..], "seeds": [..]}.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Write the bundled synthetic clip, region map and prompts.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// h,w,frames,channels
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, default_value = "disk")]
        layout: Layout,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Invert(flags) => cmd_invert(&flags),
        Command::Edit(flags) => cmd_edit(&flags),
        Command::Eval { run, protocol, probe } => cmd_eval(&run, protocol.as_deref(), probe.as_deref()),
        Command::Ablate { run, grid } => cmd_ablate(&run, grid.as_deref()),
        Command::Fixture {
            out,
            dims,
            layout,
            seed,
        } => cmd_fixture(&out, dims.as_deref(), layout, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let diag = serde_json::json!({
                "kind": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{diag}");
            ExitCode::from(2)
        }
    }
}
