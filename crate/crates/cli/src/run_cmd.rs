use std::path::PathBuf;

use anyhow::Context;
use branchsim_core::report::write_run;
use branchsim_core::runner::{run_scenario, RunOutput};
use branchsim_core::scenario::Scenario;
use clap::Args;

#[derive(Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    pub scenario: PathBuf,
    /// Override the scenario's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: scenario's out_dir, then $BRANCHSIM_OUT_DIR
    /// or ./out, plus the scenario file stem).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn load_scenario(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading scenario file {}", path.display()))?;
    let mut scenario: Scenario =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    Ok(scenario)
}

fn print_summary(output: &RunOutput) {
    for trial in &output.trials {
        let s = &trial.summary;
        println!(
            "trial seed={} requests={} accuracy={:.4} e2e p50/p90/p97/p99 = {}/{}/{}/{} ms queuing mean = {:.0} ms",
            trial.seed, s.n_requests, s.accuracy, s.e2e.p50, s.e2e.p90, s.e2e.p97, s.e2e.p99,
            s.queuing.mean
        );
    }
    let a = &output.aggregate;
    println!(
        "aggregate over {} trial(s): accuracy = {:.4} +- {:.4}, e2e p97 = {:.0} +- {:.0} ms, e2e p99 = {:.0} +- {:.0} ms",
        a.trials, a.accuracy.mean, a.accuracy.sd, a.e2e.p97.mean, a.e2e.p97.sd, a.e2e.p99.mean,
        a.e2e.p99.sd
    );
}

pub fn run(args: RunArgs) -> anyhow::Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let leaf = args
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_owned());
    let out_dir = crate::resolve_out_dir(args.out, scenario.out_dir.clone(), &leaf);
    let output = run_scenario(&scenario)?;
    write_run(&out_dir, &output)
        .with_context(|| format!("writing outputs to {}", out_dir.display()))?;
    print_summary(&output);
    println!("wrote {}", out_dir.display());
    Ok(())
}
