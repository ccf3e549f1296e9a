//! Executes a scenario: one simulation per trial, each on its own root seed,
//! reduced to summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ConfigError, SimError};
use crate::metrics::{OccupancySample, RequestRecord, RunSummary, SummaryAggregate};
use crate::rng::split_stream;
use crate::scenario::Scenario;
use crate::scheduler::{RunResult, Simulation};
use crate::workload::{generate_arrivals, OutcomeSource};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

/// One trial's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialOutput {
    pub seed: u64,
    pub summary: RunSummary,
    pub records: Vec<RequestRecord>,
    pub occupancy: Vec<OccupancySample>,
}

/// All trials of a scenario plus the cross-trial aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub trials: Vec<TrialOutput>,
    pub aggregate: SummaryAggregate,
}

/// Run one trial of a scenario at an explicit root seed, returning the full
/// result (including the event trace).
pub fn run_trial(scenario: &Scenario, seed: u64) -> Result<RunResult, RunError> {
    let policy = scenario.policy.resolve()?;
    let mut arrivals_rng = split_stream(seed, "arrivals");
    let requests = generate_arrivals(
        &scenario.workload,
        scenario.arrival_rate,
        scenario.horizon_ms,
        &mut arrivals_rng,
    )?;
    let source = OutcomeSource::Sampled {
        root_seed: seed,
        config: scenario.workload.clone(),
    };
    let simulation = Simulation::new(policy, scenario.engine, requests, source)?;
    Ok(simulation.run()?)
}

/// Run every trial of a scenario and aggregate the summaries.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, RunError> {
    scenario.validate()?;
    let mut trials = Vec::with_capacity(scenario.trials as usize);
    for trial in 0..scenario.trials {
        let seed = scenario.trial_seed(trial);
        let result = run_trial(scenario, seed)?;
        let summary = RunSummary::from_records(&result.records)
            .map_err(|e| ConfigError::new("horizon_ms", format!("no requests generated: {e}")))?;
        trials.push(TrialOutput {
            seed,
            summary,
            records: result.records,
            occupancy: result.occupancy,
        });
    }
    let aggregate =
        SummaryAggregate::over(&trials.iter().map(|t| t.summary.clone()).collect::<Vec<_>>());
    Ok(RunOutput {
        scenario: scenario.normalized()?,
        trials,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::PolicyScenario;
    use crate::scheduler::PolicyKind;

    fn tiny_scenario(policy: PolicyKind, n: u32) -> Scenario {
        let engine = crate::engine::EngineConfig {
            batch_size: 16,
            ..Default::default()
        };
        Scenario {
            seed: 11,
            arrival_rate: 2.0,
            horizon_ms: 20_000,
            trials: 2,
            out_dir: None,
            workload: crate::workload::WorkloadConfig::default(),
            engine,
            policy: PolicyScenario::new(policy, n),
        }
    }

    #[test]
    fn runs_all_trials_and_aggregates() {
        let out = run_scenario(&tiny_scenario(PolicyKind::Sart, 4)).unwrap();
        assert_eq!(out.trials.len(), 2);
        assert_eq!(out.trials[0].seed, 11);
        assert_eq!(out.trials[1].seed, 12);
        assert_eq!(out.aggregate.trials, 2);
        for trial in &out.trials {
            assert_eq!(trial.summary.n_requests, trial.records.len());
            assert!(!trial.records.is_empty());
            for r in &trial.records {
                assert_eq!(r.e2e_ms, r.queuing_ms + r.inference_ms);
            }
            // Ledger fully drained at the end of the run.
            assert_eq!(trial.occupancy.last().unwrap().resident_tokens, 0);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let scenario = tiny_scenario(PolicyKind::SelfConsistency, 4);
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario(&scenario).unwrap();
        assert_eq!(
            serde_json::to_string(&a.trials).unwrap(),
            serde_json::to_string(&b.trials).unwrap()
        );
    }
}
