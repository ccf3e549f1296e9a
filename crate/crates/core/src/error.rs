use thiserror::Error;

/// Contract violations and runtime failures inside a simulation run.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("clock cannot move backward: delta {0}ms is negative")]
    NegativeDelta(i64),
    #[error("clock jump target {target}ms is before current time {now}ms")]
    ClockBackward { now: u64, target: u64 },
    #[error("decode batch of {got} branches exceeds configured batch size {max}")]
    BatchOverflow { got: usize, max: usize },
    #[error("decode batch must be non-empty and contain only running branches")]
    InvalidBatch,
    #[error("branch {request_id}/{branch_index} is not terminal; cannot release its KV")]
    ReleaseNonTerminal { request_id: u64, branch_index: u32 },
    #[error("branch {request_id}/{branch_index} KV already released")]
    DoubleRelease { request_id: u64, branch_index: u32 },
    #[error("finalize called with zero terminated branches for request {0}")]
    EmptyFinalize(u64),
    #[error(
        "KV ledger audit failed at t={time_ms}ms: incremental total {incremental} != recomputed {recomputed}"
    )]
    LedgerAuditMismatch {
        time_ms: u64,
        incremental: u64,
        recomputed: u64,
    },
    #[error("scheduler stalled at t={0}ms: admitted work cannot make progress")]
    Stalled(u64),
}

/// A configuration or validation failure, naming the offending field.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}
