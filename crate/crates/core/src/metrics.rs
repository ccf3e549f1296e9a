//! Per-request outcome records and the evaluation quantities derived from
//! them: nearest-rank percentile latencies, the queuing/inference
//! decomposition, accuracy, and occupancy traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::BranchState;
use crate::workload::RequestId;
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty sample")]
    EmptySample,
    #[error("percentile {0} outside (0, 100]")]
    InvalidPercentile(Real),
}

/// Terminal state and token counts of one branch, kept in the request record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch_index: u32,
    pub state: BranchState,
    pub target_length: u64,
    pub tokens_decoded: u64,
}

/// Outcome of one served request.
///
/// Admission is the start of prefill, so `queuing_ms` is the wait for batch
/// availability and `inference_ms` covers prefill plus decoding through
/// finalization; the two always sum to `e2e_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub arrival_ms: u64,
    pub prefill_start_ms: u64,
    pub finalize_ms: u64,
    pub queuing_ms: u64,
    pub inference_ms: u64,
    pub e2e_ms: u64,
    pub is_correct: bool,
    pub final_label: u32,
    /// Branch whose answer was chosen; `None` for consensus decisions.
    pub chosen_branch: Option<u32>,
    /// Time-integrated resident KV of this request (token-milliseconds).
    pub kv_token_ms: u64,
    pub branches: Vec<BranchSummary>,
}

/// Engine occupancy at one chunk boundary (after bookkeeping).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub time_ms: u64,
    pub running_branches: u64,
    pub resident_tokens: u64,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn percentile(values: &[u64], p: Real) -> Result<u64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (p / 100.0 * sorted.len() as Real).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Fraction of correctly answered requests.
pub fn accuracy(records: &[RequestRecord]) -> Result<Real, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let correct = records.iter().filter(|r| r.is_correct).count();
    Ok(correct as Real / records.len() as Real)
}

/// Percentile profile of one latency series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub p50: u64,
    pub p90: u64,
    pub p97: u64,
    pub p99: u64,
    pub mean: Real,
}

impl LatencyStats {
    pub fn from_values(values: &[u64]) -> Result<Self, MetricsError> {
        Ok(Self {
            p50: percentile(values, 50.0)?,
            p90: percentile(values, 90.0)?,
            p97: percentile(values, 97.0)?,
            p99: percentile(values, 99.0)?,
            mean: values.iter().sum::<u64>() as Real / values.len() as Real,
        })
    }
}

/// Summary of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_requests: usize,
    pub accuracy: Real,
    pub e2e: LatencyStats,
    pub queuing: LatencyStats,
    pub inference: LatencyStats,
}

impl RunSummary {
    pub fn from_records(records: &[RequestRecord]) -> Result<Self, MetricsError> {
        let series = |f: fn(&RequestRecord) -> u64| -> Vec<u64> {
            records.iter().map(f).collect()
        };
        Ok(Self {
            n_requests: records.len(),
            accuracy: accuracy(records)?,
            e2e: LatencyStats::from_values(&series(|r| r.e2e_ms))?,
            queuing: LatencyStats::from_values(&series(|r| r.queuing_ms))?,
            inference: LatencyStats::from_values(&series(|r| r.inference_ms))?,
        })
    }
}

/// Mean and sample standard deviation of one quantity across trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: Real,
    pub sd: Real,
}

impl AggregateStat {
    pub fn from_samples(samples: &[Real]) -> Self {
        let n = samples.len() as Real;
        let mean = samples.iter().sum::<Real>() / n;
        let sd = if samples.len() < 2 {
            0.0
        } else {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<Real>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyAggregate {
    pub p50: AggregateStat,
    pub p90: AggregateStat,
    pub p97: AggregateStat,
    pub p99: AggregateStat,
    pub mean: AggregateStat,
}

impl LatencyAggregate {
    fn over(trials: &[&LatencyStats]) -> Self {
        let collect = |f: fn(&LatencyStats) -> Real| -> Vec<Real> {
            trials.iter().map(|t| f(t)).collect()
        };
        Self {
            p50: AggregateStat::from_samples(&collect(|t| t.p50 as Real)),
            p90: AggregateStat::from_samples(&collect(|t| t.p90 as Real)),
            p97: AggregateStat::from_samples(&collect(|t| t.p97 as Real)),
            p99: AggregateStat::from_samples(&collect(|t| t.p99 as Real)),
            mean: AggregateStat::from_samples(&collect(|t| t.mean)),
        }
    }
}

/// Mean +- sd over trials for every reported quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryAggregate {
    pub trials: usize,
    pub accuracy: AggregateStat,
    pub e2e: LatencyAggregate,
    pub queuing: LatencyAggregate,
    pub inference: LatencyAggregate,
}

impl SummaryAggregate {
    pub fn over(summaries: &[RunSummary]) -> Self {
        let acc: Vec<Real> = summaries.iter().map(|s| s.accuracy).collect();
        Self {
            trials: summaries.len(),
            accuracy: AggregateStat::from_samples(&acc),
            e2e: LatencyAggregate::over(&summaries.iter().map(|s| &s.e2e).collect::<Vec<_>>()),
            queuing: LatencyAggregate::over(
                &summaries.iter().map(|s| &s.queuing).collect::<Vec<_>>(),
            ),
            inference: LatencyAggregate::over(
                &summaries.iter().map(|s| &s.inference).collect::<Vec<_>>(),
            ),
        }
    }
}
