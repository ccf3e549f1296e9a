//! Deterministic discrete-event simulator of an LLM serving engine running
//! branch-sampling policies.
//!
//! The simulated engine batches reasoning branches for chunked decoding with
//! continuous batching, shares prefix KV across a request's branches, and
//! releases KV the moment a branch terminates. On top of it sit four
//! scheduling policies: a single-branch baseline (`vanilla`), majority
//! voting over all branches (`self-consistency`), redundant sampling with
//! early stopping (`sart-no-prune`), and the same plus two-phase
//! reward-guided pruning (`sart`).
//!
//! Everything is driven by a virtual integer-millisecond clock and named
//! ChaCha8 random streams, so a run is a pure function of its scenario and
//! seed: replays are byte-identical, and per-branch streams keep sampled
//! workloads comparable across policies.

pub mod clock;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod orderstats;
pub mod report;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod scenario;
pub mod scheduler;
pub mod workload;

/// Concrete scalar used by the simulator; the analytic routines in
/// [`orderstats`] stay generic over [`scalar::Scalar`].
pub type Real = f64;

pub use clock::SimClock;
pub use engine::{Branch, BranchState, Engine, EngineConfig, KvLedger};
pub use error::{ConfigError, SimError};
pub use metrics::{accuracy, percentile, OccupancySample, RequestRecord, RunSummary};
pub use orderstats::{cdf_order_stat, monotonicity_gap, monte_carlo_order_stat, OrderStatQuery};
pub use rng::{split_stream, RngStream};
pub use runner::{run_scenario, run_trial, RunOutput, TrialOutput};
pub use scalar::Scalar;
pub use scenario::{PolicyScenario, Scenario};
pub use scheduler::{
    Aggregation, FinalResponse, PolicyConfig, PolicyKind, RunResult, Simulation, TraceEvent,
};
pub use workload::{
    generate_arrivals, BranchOutcome, OutcomeSource, Request, RewardTrajectory, ScriptedOutcomes,
    WorkloadConfig,
};
