//! Scenario runner CLI: execute single runs, policy/N sweeps, and
//! order-statistic grid dumps.

mod orderstats_cmd;
mod run_cmd;
mod sweep_cmd;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Environment variable holding the default output root.
pub const OUT_DIR_ENV: &str = "BRANCHSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "branchsim",
    version,
    about = "Deterministic simulator of branch-sampling LLM serving policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and write records, summary, occupancy, and
    /// metadata files.
    Run(run_cmd::RunArgs),
    /// Run a scenario across an axis of branch counts and a set of policies,
    /// and emit a combined comparison table.
    Sweep(sweep_cmd::SweepArgs),
    /// Dump the order-statistic CDF grid (analytic vs Monte Carlo).
    Orderstats(orderstats_cmd::OrderstatsArgs),
}

/// Resolve the output directory: CLI flag, then scenario file, then the
/// environment default, then ./out.
pub fn resolve_out_dir(
    flag: Option<PathBuf>,
    scenario_dir: Option<PathBuf>,
    leaf: &str,
) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = scenario_dir {
        return dir;
    }
    let root = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    root.join(leaf)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run_cmd::run(args),
        Command::Sweep(args) => sweep_cmd::sweep(args),
        Command::Orderstats(args) => orderstats_cmd::orderstats(args),
    }
}
