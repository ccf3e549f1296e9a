use std::path::PathBuf;

use anyhow::{bail, Context};
use branchsim_core::orderstats::{
    cdf_order_stat, expected_stopping_length, monte_carlo_order_stat, OrderStatQuery,
};
use branchsim_core::report::write_atomic;
use branchsim_core::rng::{split_stream, uniform01};
use branchsim_core::workload::LengthParams;
use clap::Args;

#[derive(Args)]
pub struct OrderstatsArgs {
    /// Rank of interest (the m-th smallest of n draws).
    #[arg(long)]
    pub m: u32,
    /// Number of draws.
    #[arg(long)]
    pub n: u32,
    /// Monte Carlo trials per grid point.
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    /// Number of grid points over the uniform(0, 1) base distribution.
    #[arg(long, default_value_t = 11)]
    pub grid: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print expected stopping lengths at these branch counts, under
    /// the branch-length distribution below.
    #[arg(long, value_delimiter = ',')]
    pub stop_lens: Vec<u32>,
    #[arg(long, default_value_t = 8000.0)]
    pub length_median: f64,
    #[arg(long, default_value_t = 0.5)]
    pub length_sigma_log: f64,
    #[arg(long, default_value_t = 256)]
    pub length_min: u64,
    #[arg(long, default_value_t = 32_768)]
    pub length_max: u64,
}

pub fn orderstats(args: OrderstatsArgs) -> anyhow::Result<()> {
    if args.m < 1 || args.m > args.n {
        bail!("--m: must satisfy 1 <= m <= n (m={}, n={})", args.m, args.n);
    }
    if args.grid < 2 {
        bail!("--grid: need at least 2 points");
    }
    if args.trials < 1 {
        bail!("--trials: must be >= 1");
    }
    if let Some(&bad) = args.stop_lens.iter().find(|&&n| n < args.m) {
        bail!("--stop-lens: every n must be >= m (got n={bad}, m={})", args.m);
    }

    let mut csv = String::from("x,base_cdf,analytic,empirical,abs_diff\n");
    for i in 0..args.grid {
        let x = f64::from(i) / f64::from(args.grid - 1);
        let analytic = cdf_order_stat(&OrderStatQuery {
            m: args.m,
            n: args.n,
            f: x,
        })?;
        let mut rng = split_stream(args.seed, &format!("orderstats-mc/{i}"));
        let empirical = monte_carlo_order_stat(
            args.m,
            args.n,
            uniform01,
            x,
            args.trials,
            &mut rng,
        )?;
        csv.push_str(&format!(
            "{x},{x},{analytic},{empirical},{}\n",
            (analytic - empirical).abs()
        ));
    }
    match &args.out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }

    if !args.stop_lens.is_empty() {
        let params = LengthParams {
            median_tokens: args.length_median,
            sigma_log: args.length_sigma_log,
            min_tokens: args.length_min,
            max_tokens: args.length_max,
        };
        println!("n,expected_stopping_tokens_m{}", args.m);
        for &n in &args.stop_lens {
            let expected = expected_stopping_length(
                args.m,
                n,
                |x| params.cdf(x),
                params.min_tokens as f64,
                params.max_tokens as f64,
                4097,
            )?;
            println!("{n},{expected:.1}");
        }
    }
    Ok(())
}
