use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vnsa_cli::commands;
use vnsa_cli::config::{parse_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "vnsa",
    about = "Sparse-attention engine: gated compression/selection/window branches over GQA, \
             with budget, sink, gate, and cost analyses"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate seeded Q/K/V, gate-parameter, and span fixtures.
    Gen {
        /// Configuration file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory the fixtures are written to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the hybrid attention layer over generated fixtures.
    Attend {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the tensor and summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the dense GQA oracle instead of the sparse branches.
        #[arg(long)]
        dense: bool,
    },
    /// Profile branch operation counts and wall time across context lengths.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ascending context lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Detect attention sinks in the dense oracle and each branch.
    Sinks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit gate statistics per layer and branch.
    Gates {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print attention-budget arithmetic for a configuration.
    Budget {
        /// Number of selectable blocks.
        blocks: u64,
        /// Block size in tokens.
        block_size: u64,
        /// Sliding-window width in tokens.
        window: u64,
        /// Context length; omit it when giving --frames and --tpf.
        context_len: Option<u64>,
        /// Frame count (with --tpf).
        #[arg(long)]
        frames: Option<u64>,
        /// Vision tokens per frame (with --frames).
        #[arg(long)]
        tpf: Option<u64>,
    },
    /// Run the built-in invariant suites; exit 0 iff all pass.
    Check,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(parse_config(&text)?)
        }
        None => Ok(parse_config("")?),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gen { config, seed, out } => {
            let cfg =
                commands::apply_overrides(load_config(config.as_ref())?, seed, out.as_deref(), true);
            commands::cmd_gen(&cfg)?;
        }
        Cmd::Attend { config, out, dense } => {
            let cfg =
                commands::apply_overrides(load_config(config.as_ref())?, None, out.as_deref(), false);
            commands::cmd_attend(&cfg, dense)?;
        }
        Cmd::Bench {
            config,
            out,
            lengths,
        } => {
            let cfg =
                commands::apply_overrides(load_config(config.as_ref())?, None, out.as_deref(), false);
            let lengths = lengths.unwrap_or_else(|| vec![1024, 2048, 4096]);
            commands::cmd_bench(&cfg, &lengths)?;
        }
        Cmd::Sinks { config, out } => {
            let cfg =
                commands::apply_overrides(load_config(config.as_ref())?, None, out.as_deref(), false);
            commands::cmd_sinks(&cfg)?;
        }
        Cmd::Gates { config, out } => {
            let cfg =
                commands::apply_overrides(load_config(config.as_ref())?, None, out.as_deref(), false);
            commands::cmd_gates(&cfg)?;
        }
        Cmd::Budget {
            blocks,
            block_size,
            window,
            context_len,
            frames,
            tpf,
        } => {
            commands::cmd_budget(blocks, block_size, window, context_len, frames, tpf)?;
        }
        Cmd::Check => return commands::cmd_check(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
