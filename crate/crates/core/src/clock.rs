use crate::error::SimError;

/// Virtual time in integer milliseconds.
///
/// The clock only moves forward, and only through explicit cost charges
/// (prefill, decode chunks, idle jumps to the next arrival). Integer
/// milliseconds keep event ordering and percentile latencies exactly
/// reproducible across runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimClock {
    now_ms: u64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    /// Advance by a non-negative duration and return the new time.
    pub fn advance(&mut self, delta_ms: u64) -> u64 {
        self.now_ms += delta_ms;
        self.now_ms
    }

    /// Advance by a possibly-signed duration, rejecting negative deltas.
    pub fn checked_advance(&mut self, delta_ms: i64) -> Result<u64, SimError> {
        if delta_ms < 0 {
            return Err(SimError::NegativeDelta(delta_ms));
        }
        Ok(self.advance(delta_ms as u64))
    }

    /// Jump forward to an absolute time (used when the engine idles until
    /// the next arrival). Jumping backward is a contract violation.
    pub fn jump_to(&mut self, target_ms: u64) -> Result<(), SimError> {
        if target_ms < self.now_ms {
            return Err(SimError::ClockBackward {
                now: self.now_ms,
                target: target_ms,
            });
        }
        self.now_ms = target_ms;
        Ok(())
    }
}
