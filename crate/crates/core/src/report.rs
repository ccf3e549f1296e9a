//! File emission for runs: per-request records (JSON lines), occupancy
//! traces (CSV), a summary, and a metadata header sufficient to reproduce
//! the run byte-for-byte. Files are written atomically (temp file + rename).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::{PRNG_ALGORITHM, PRNG_SEEDING};
use crate::runner::RunOutput;
use crate::scenario::Scenario;

/// Reproduction header written alongside every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub artifact: String,
    pub version: String,
    pub prng_algorithm: String,
    pub prng_seeding: String,
    pub seed: u64,
    pub trial_seeds: Vec<u64>,
    /// Scenario echo with every optional field resolved (output directory
    /// excluded so reruns into different directories stay byte-identical).
    pub scenario: Scenario,
}

impl RunMetadata {
    pub fn for_run(output: &RunOutput) -> Self {
        Self {
            artifact: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            prng_algorithm: PRNG_ALGORITHM.to_owned(),
            prng_seeding: PRNG_SEEDING.to_owned(),
            seed: output.scenario.seed,
            trial_seeds: output.trials.iter().map(|t| t.seed).collect(),
            scenario: output.scenario.clone(),
        }
    }
}

/// Write all files for a finished run into `out_dir`:
/// `meta.json`, `summary.json`, and per-trial `records_trial<k>.jsonl`
/// and `occupancy_trial<k>.csv`.
pub fn write_run(out_dir: &Path, output: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let meta = RunMetadata::for_run(output);
    write_atomic(
        &out_dir.join("meta.json"),
        format!("{}\n", serde_json::to_string_pretty(&meta)?).as_bytes(),
    )?;

    #[derive(Serialize)]
    struct SummaryFile<'a> {
        trials: Vec<TrialSummary<'a>>,
        aggregate: &'a crate::metrics::SummaryAggregate,
    }
    #[derive(Serialize)]
    struct TrialSummary<'a> {
        seed: u64,
        #[serde(flatten)]
        summary: &'a crate::metrics::RunSummary,
    }
    let summary = SummaryFile {
        trials: output
            .trials
            .iter()
            .map(|t| TrialSummary {
                seed: t.seed,
                summary: &t.summary,
            })
            .collect(),
        aggregate: &output.aggregate,
    };
    write_atomic(
        &out_dir.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?).as_bytes(),
    )?;

    for (k, trial) in output.trials.iter().enumerate() {
        let mut records = String::new();
        for record in &trial.records {
            records.push_str(&serde_json::to_string(record)?);
            records.push('\n');
        }
        write_atomic(
            &out_dir.join(format!("records_trial{k}.jsonl")),
            records.as_bytes(),
        )?;

        let mut occupancy = String::from("time_ms,running_branches,resident_tokens\n");
        for s in &trial.occupancy {
            occupancy.push_str(&format!(
                "{},{},{}\n",
                s.time_ms, s.running_branches, s.resident_tokens
            ));
        }
        write_atomic(
            &out_dir.join(format!("occupancy_trial{k}.csv")),
            occupancy.as_bytes(),
        )?;
    }
    Ok(())
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::run_scenario;
    use crate::scenario::PolicyScenario;
    use crate::scheduler::PolicyKind;

    #[test]
    fn run_directory_is_complete_and_reproducible() {
        let scenario = Scenario {
            seed: 3,
            arrival_rate: 2.0,
            horizon_ms: 10_000,
            trials: 2,
            out_dir: None,
            workload: crate::workload::WorkloadConfig::default(),
            engine: crate::engine::EngineConfig::default(),
            policy: PolicyScenario::new(PolicyKind::Vanilla, 1),
        };
        let output = run_scenario(&scenario).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_run(dir_a.path(), &output).unwrap();
        let output_again = run_scenario(&scenario).unwrap();
        write_run(dir_b.path(), &output_again).unwrap();
        for name in [
            "meta.json",
            "summary.json",
            "records_trial0.jsonl",
            "records_trial1.jsonl",
            "occupancy_trial0.csv",
            "occupancy_trial1.csv",
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert!(!a.is_empty(), "{name} empty");
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // One record line per request.
        let records = std::fs::read_to_string(dir_a.path().join("records_trial0.jsonl")).unwrap();
        assert_eq!(records.lines().count(), output.trials[0].records.len());
        // Metadata names the PRNG and echoes the seed.
        let meta =
            std::fs::read_to_string(dir_a.path().join("meta.json")).unwrap();
        assert!(meta.contains("ChaCha8"));
        assert!(meta.contains("\"seed\": 3"));
    }
}
