use std::path::PathBuf;

use anyhow::{bail, Context};
use branchsim_core::report::{write_atomic, write_run};
use branchsim_core::runner::{run_scenario, RunOutput};
use branchsim_core::scenario::PolicyScenario;
use branchsim_core::scheduler::PolicyKind;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Args)]
pub struct SweepArgs {
    /// Base scenario file (TOML); its policy block is replaced per sweep
    /// point (m and beta re-derive from each n).
    pub scenario: PathBuf,
    /// Sweep axis, e.g. N=1,2,4,8
    #[arg(long)]
    pub axis: String,
    /// Comma-separated policies: sart, sart-no-prune, sc, vanilla.
    #[arg(long, value_delimiter = ',')]
    pub policies: Vec<String>,
    /// Override the scenario's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_axis(axis: &str) -> anyhow::Result<Vec<u32>> {
    let Some(values) = axis.strip_prefix("N=").or_else(|| axis.strip_prefix("n=")) else {
        bail!("--axis: expected the form N=1,2,4,8 (only the branch-count axis is supported)");
    };
    let parsed: Vec<u32> = values
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .context("--axis: values must be positive integers")?;
    if parsed.is_empty() {
        bail!("--axis: the axis must list at least one value");
    }
    if parsed.contains(&0) {
        bail!("--axis: branch counts must be >= 1");
    }
    Ok(parsed)
}

fn parse_policy(name: &str) -> anyhow::Result<PolicyKind> {
    Ok(match name.trim().to_ascii_lowercase().as_str() {
        "vanilla" => PolicyKind::Vanilla,
        "sc" | "self-consistency" | "selfconsistency" => PolicyKind::SelfConsistency,
        "sart" => PolicyKind::Sart,
        "sart-no-prune" | "sartnoprune" => PolicyKind::SartNoPrune,
        other => bail!("--policies: unknown policy `{other}`"),
    })
}

fn policy_label(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Vanilla => "vanilla",
        PolicyKind::SelfConsistency => "self-consistency",
        PolicyKind::Sart => "sart",
        PolicyKind::SartNoPrune => "sart-no-prune",
    }
}

#[derive(Serialize)]
struct SweepRow {
    policy: String,
    n: u32,
    trials: usize,
    accuracy_mean: f64,
    accuracy_sd: f64,
    e2e_p50_ms: f64,
    e2e_p90_ms: f64,
    e2e_p97_ms: f64,
    e2e_p97_sd: f64,
    e2e_p99_ms: f64,
    e2e_mean_ms: f64,
    queuing_mean_ms: f64,
    inference_mean_ms: f64,
}

impl SweepRow {
    fn from_output(policy: PolicyKind, n: u32, output: &RunOutput) -> Self {
        let a = &output.aggregate;
        Self {
            policy: policy_label(policy).to_owned(),
            n,
            trials: a.trials,
            accuracy_mean: a.accuracy.mean,
            accuracy_sd: a.accuracy.sd,
            e2e_p50_ms: a.e2e.p50.mean,
            e2e_p90_ms: a.e2e.p90.mean,
            e2e_p97_ms: a.e2e.p97.mean,
            e2e_p97_sd: a.e2e.p97.sd,
            e2e_p99_ms: a.e2e.p99.mean,
            e2e_mean_ms: a.e2e.mean.mean,
            queuing_mean_ms: a.queuing.mean.mean,
            inference_mean_ms: a.inference.mean.mean,
        }
    }

    fn csv_header() -> &'static str {
        "policy,n,trials,accuracy_mean,accuracy_sd,e2e_p50_ms,e2e_p90_ms,e2e_p97_ms,e2e_p97_sd,e2e_p99_ms,e2e_mean_ms,queuing_mean_ms,inference_mean_ms"
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.n,
            self.trials,
            self.accuracy_mean,
            self.accuracy_sd,
            self.e2e_p50_ms,
            self.e2e_p90_ms,
            self.e2e_p97_ms,
            self.e2e_p97_sd,
            self.e2e_p99_ms,
            self.e2e_mean_ms,
            self.queuing_mean_ms,
            self.inference_mean_ms
        )
    }
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let base = crate::run_cmd::load_scenario(&args.scenario, args.seed)?;
    let axis = parse_axis(&args.axis)?;
    if args.policies.is_empty() {
        bail!("--policies: at least one policy is required");
    }
    let policies: Vec<PolicyKind> = args
        .policies
        .iter()
        .map(|p| parse_policy(p))
        .collect::<Result<_, _>>()?;

    // One job per (policy, n); vanilla is pinned at n = 1.
    let mut jobs: Vec<(PolicyKind, u32)> = Vec::new();
    for &policy in &policies {
        if policy == PolicyKind::Vanilla {
            jobs.push((policy, 1));
        } else {
            jobs.extend(axis.iter().map(|&n| (policy, n)));
        }
    }

    let leaf = args
        .scenario
        .file_stem()
        .map(|s| format!("{}_sweep", s.to_string_lossy()))
        .unwrap_or_else(|| "sweep".to_owned());
    let out_dir = crate::resolve_out_dir(args.out, base.out_dir.clone(), &leaf);

    // Sweep points are independent: run them in a parallel worker pool.
    // Each run is internally single-threaded and deterministic.
    let outputs: Vec<(PolicyKind, u32, RunOutput)> = jobs
        .par_iter()
        .map(|&(policy, n)| {
            let mut scenario = base.clone();
            scenario.out_dir = None;
            scenario.policy = PolicyScenario::new(policy, n);
            scenario.policy.alpha = base.policy.alpha;
            scenario.validate()?;
            let output = run_scenario(&scenario)?;
            Ok::<_, anyhow::Error>((policy, n, output))
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(outputs.len());
    for (policy, n, output) in &outputs {
        let run_dir = out_dir.join(format!("run_{}_n{}", policy_label(*policy), n));
        write_run(&run_dir, output)
            .with_context(|| format!("writing {}", run_dir.display()))?;
        rows.push(SweepRow::from_output(*policy, *n, output));
    }

    let mut csv = String::from(SweepRow::csv_header());
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    write_atomic(&out_dir.join("sweep_summary.csv"), csv.as_bytes())?;
    write_atomic(
        &out_dir.join("sweep_summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&rows)?).as_bytes(),
    )?;
    print!("{csv}");
    println!("wrote {}", out_dir.display());
    Ok(())
}
