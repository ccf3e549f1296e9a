//! Cost and memory model of a single inference engine replica.
//!
//! Prefill charges wall time proportional to the prompt; decoding charges
//! whole chunks of `chunk_steps` steps at a per-step cost that grows
//! affinely with the batch size at chunk start. Branches finishing mid-chunk
//! neither free slots nor shrink the charged batch until the boundary, so
//! each chunk's cost depends only on (chunk_steps, starting batch size).
//!
//! KV accounting counts tokens: one prefix entry per request, shared across
//! its branches and held until the last branch terminates, plus each live
//! branch's decoded tokens. The budget gates admission; decoded-token growth
//! of already-admitted branches is never evicted (there is no preemption),
//! so a transient overshoot past the budget is possible and intentional.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::SimClock;
use crate::error::{ConfigError, SimError};
use crate::workload::{BranchOutcome, Request, RequestId, RewardTrajectory};
use crate::Real;

pub type BranchId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Max decode batch size, in branches.
    pub batch_size: usize,
    /// Decode chunk length, in steps (one token per branch per step).
    pub chunk_steps: u64,
    /// Prefill cost: ms per prompt token.
    pub prefill_ms_per_token: Real,
    /// Per-step decode cost: `decode_base_ms + decode_ms_per_branch * batch`.
    pub decode_base_ms: Real,
    pub decode_ms_per_branch: Real,
    /// Max resident KV tokens; checked at admission.
    pub kv_budget_tokens: u64,
    /// Wall time per reward evaluation at chunk boundaries.
    pub prm_eval_ms: Real,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            chunk_steps: 400,
            prefill_ms_per_token: 0.1,
            decode_base_ms: 2.0,
            decode_ms_per_branch: 0.05,
            kv_budget_tokens: 2_000_000,
            prm_eval_ms: 0.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 1 {
            return Err(ConfigError::new("engine.batch_size", "must be >= 1"));
        }
        if self.chunk_steps < 1 {
            return Err(ConfigError::new("engine.chunk_steps", "must be >= 1"));
        }
        for (field, value) in [
            ("engine.prefill_ms_per_token", self.prefill_ms_per_token),
            ("engine.decode_base_ms", self.decode_base_ms),
            ("engine.decode_ms_per_branch", self.decode_ms_per_branch),
            ("engine.prm_eval_ms", self.prm_eval_ms),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::new(field, "must be a finite value >= 0"));
            }
        }
        if self.kv_budget_tokens < 1 {
            return Err(ConfigError::new("engine.kv_budget_tokens", "must be >= 1"));
        }
        Ok(())
    }

    /// Prefill wall time for a prompt, rounded to whole milliseconds.
    pub fn prefill_cost_ms(&self, prompt_len: u64) -> u64 {
        (self.prefill_ms_per_token * prompt_len as Real).round() as u64
    }

    /// Wall time of one decode chunk at the given starting batch size.
    pub fn chunk_cost_ms(&self, batch: usize) -> u64 {
        let per_step = self.decode_base_ms + self.decode_ms_per_branch * batch as Real;
        (self.chunk_steps as Real * per_step).round() as u64
    }

    /// Wall time of `evals` reward evaluations.
    pub fn prm_cost_ms(&self, evals: u64) -> u64 {
        (self.prm_eval_ms * evals as Real).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchState {
    Queued,
    Running,
    Completed,
    Pruned,
    EarlyStopped,
}

impl BranchState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Pruned | Self::EarlyStopped)
    }
}

/// One reasoning trajectory: the unit of batching in decoding.
#[derive(Debug, Clone)]
pub struct Branch {
    pub request_id: RequestId,
    pub branch_index: u32,
    pub outcome: BranchOutcome,
    pub trajectory: RewardTrajectory,
    pub tokens_decoded: u64,
    pub state: BranchState,
    pub enqueue_ms: u64,
    pub start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    /// Reward observed at the checkpoint that pruned this branch.
    pub pruned_reward: Option<Real>,
    pub(crate) kv_released: bool,
}

impl Branch {
    pub fn remaining(&self) -> u64 {
        self.outcome.target_length - self.tokens_decoded
    }

    pub fn is_complete(&self) -> bool {
        self.tokens_decoded == self.outcome.target_length
    }
}

#[derive(Debug, Clone, Default)]
struct KvEntry {
    prefix_tokens: u64,
    decoded_tokens: u64,
    live_branches: u32,
}

/// Token-count KV accounting with prefix sharing.
#[derive(Debug, Clone)]
pub struct KvLedger {
    budget: u64,
    total_resident: u64,
    entries: BTreeMap<RequestId, KvEntry>,
    /// Cumulative resident-token x time per request; survives release.
    token_ms: BTreeMap<RequestId, u64>,
}

impl KvLedger {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            total_resident: 0,
            entries: BTreeMap::new(),
            token_ms: BTreeMap::new(),
        }
    }

    pub fn total_resident(&self) -> u64 {
        self.total_resident
    }

    pub fn resident_of(&self, request_id: RequestId) -> u64 {
        self.entries
            .get(&request_id)
            .map(|e| e.prefix_tokens + e.decoded_tokens)
            .unwrap_or(0)
    }

    /// Time-integrated resident tokens of a request (token-milliseconds).
    pub fn token_ms_of(&self, request_id: RequestId) -> u64 {
        self.token_ms.get(&request_id).copied().unwrap_or(0)
    }

    fn can_admit(&self, prefix_tokens: u64) -> bool {
        self.total_resident + prefix_tokens <= self.budget
    }

    fn admit(&mut self, request_id: RequestId, prefix_tokens: u64, branches: u32) {
        let prev = self.entries.insert(
            request_id,
            KvEntry {
                prefix_tokens,
                decoded_tokens: 0,
                live_branches: branches,
            },
        );
        debug_assert!(prev.is_none(), "request admitted twice");
        self.total_resident += prefix_tokens;
    }

    fn add_decoded(&mut self, request_id: RequestId, delta: u64) {
        let entry = self.entries.get_mut(&request_id).expect("admitted request");
        entry.decoded_tokens += delta;
        self.total_resident += delta;
    }

    fn release_branch(&mut self, request_id: RequestId, branch_tokens: u64) {
        let entry = self.entries.get_mut(&request_id).expect("admitted request");
        debug_assert!(entry.live_branches > 0);
        entry.decoded_tokens -= branch_tokens;
        entry.live_branches -= 1;
        self.total_resident -= branch_tokens;
        if entry.live_branches == 0 {
            debug_assert_eq!(entry.decoded_tokens, 0);
            self.total_resident -= entry.prefix_tokens;
            self.entries.remove(&request_id);
        }
    }

    /// Charge `delta_ms` of residency to every live request's integral.
    fn accumulate(&mut self, delta_ms: u64) {
        if delta_ms == 0 {
            return;
        }
        for (id, entry) in &self.entries {
            *self.token_ms.entry(*id).or_insert(0) +=
                delta_ms * (entry.prefix_tokens + entry.decoded_tokens);
        }
    }

    /// Compare the incrementally maintained totals against totals recomputed
    /// from scratch over `(request_id, prompt_len, branch tokens)` of every
    /// live branch.
    pub fn audit<'a>(
        &self,
        live: impl Iterator<Item = (&'a Request, u64)>,
        now_ms: u64,
    ) -> Result<(), SimError> {
        let mut recomputed: BTreeMap<RequestId, u64> = BTreeMap::new();
        for (request, branch_tokens) in live {
            let entry = recomputed
                .entry(request.id)
                .or_insert(request.prompt_len);
            *entry += branch_tokens;
        }
        let recomputed_total: u64 = recomputed.values().sum();
        let per_request_ok = recomputed.len() == self.entries.len()
            && recomputed
                .iter()
                .all(|(id, &tokens)| self.resident_of(*id) == tokens);
        if recomputed_total != self.total_resident || !per_request_ok {
            return Err(SimError::LedgerAuditMismatch {
                time_ms: now_ms,
                incremental: self.total_resident,
                recomputed: recomputed_total,
            });
        }
        Ok(())
    }
}

/// Result of trying to admit a request for prefill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    /// Admitted; the new branches were created in `Queued` state.
    Admitted { first_branch: BranchId },
    /// The prefix does not fit the KV budget; the request stays queued and
    /// no time is charged.
    Refused,
}

/// Clock plus ledger plus cost model: everything a chunk-driven scheduler
/// charges against.
#[derive(Debug)]
pub struct Engine {
    pub config: EngineConfig,
    pub clock: SimClock,
    pub ledger: KvLedger,
}

/// A branch that completed during a chunk, with the step inside the chunk at
/// which it finished (used to pick the earliest completion).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub branch: BranchId,
    pub steps_in_chunk: u64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        let ledger = KvLedger::new(config.kv_budget_tokens);
        Self {
            config,
            clock: SimClock::new(),
            ledger,
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// Advance the clock, charging the elapsed interval to the residency
    /// integrals of every currently live request.
    pub fn advance(&mut self, delta_ms: u64) {
        self.ledger.accumulate(delta_ms);
        self.clock.advance(delta_ms);
    }

    /// Idle until `target_ms` (no residency should exist while idle).
    pub fn jump_to(&mut self, target_ms: u64) -> Result<(), SimError> {
        debug_assert_eq!(self.ledger.total_resident(), 0);
        self.clock.jump_to(target_ms)
    }

    /// Prefill a request: charge `t_prefill(prompt_len)`, admit its prefix
    /// once, and append `n` fresh `Queued` branches to `branches`.
    ///
    /// Admission is checked before any time is charged; a refused request
    /// costs nothing and stays at the head of the queue.
    pub fn charge_prefill(
        &mut self,
        request: &Request,
        n: u32,
        source: &crate::workload::OutcomeSource,
        branches: &mut Vec<Branch>,
    ) -> Result<Admission, SimError> {
        if !self.ledger.can_admit(request.prompt_len) {
            return Ok(Admission::Refused);
        }
        self.advance(self.config.prefill_cost_ms(request.prompt_len));
        self.ledger.admit(request.id, request.prompt_len, n);
        let first_branch = branches.len();
        for j in 0..n {
            let (outcome, trajectory) = source.branch(request, j, self.config.chunk_steps);
            branches.push(Branch {
                request_id: request.id,
                branch_index: j,
                outcome,
                trajectory,
                tokens_decoded: 0,
                state: BranchState::Queued,
                enqueue_ms: self.now(),
                start_ms: None,
                end_ms: None,
                pruned_reward: None,
                kv_released: false,
            });
        }
        Ok(Admission::Admitted { first_branch })
    }

    /// Decode one chunk: every batched branch advances by
    /// `min(chunk_steps, remaining)` tokens, and the charged wall time is
    /// `chunk_steps * t_step(batch size at chunk start)` regardless of
    /// mid-chunk completions. Returns the completion set.
    pub fn decode_chunk(
        &mut self,
        branches: &mut [Branch],
        batch: &[BranchId],
    ) -> Result<Vec<Completion>, SimError> {
        if batch.len() > self.config.batch_size {
            return Err(SimError::BatchOverflow {
                got: batch.len(),
                max: self.config.batch_size,
            });
        }
        if batch.is_empty()
            || batch
                .iter()
                .any(|&id| branches[id].state != BranchState::Running)
        {
            return Err(SimError::InvalidBatch);
        }
        self.advance(self.config.chunk_cost_ms(batch.len()));
        let mut completions = Vec::new();
        for &id in batch {
            let branch = &mut branches[id];
            let steps = branch.remaining().min(self.config.chunk_steps);
            branch.tokens_decoded += steps;
            self.ledger.add_decoded(branch.request_id, steps);
            if branch.is_complete() {
                completions.push(Completion {
                    branch: id,
                    steps_in_chunk: steps,
                });
            }
        }
        Ok(completions)
    }

    /// Release a terminal branch's KV: its decoded tokens now, plus the
    /// shared prefix if this was the request's last live branch.
    pub fn release_branch(&mut self, branch: &mut Branch) -> Result<(), SimError> {
        if !branch.state.is_terminal() {
            return Err(SimError::ReleaseNonTerminal {
                request_id: branch.request_id,
                branch_index: branch.branch_index,
            });
        }
        if branch.kv_released {
            return Err(SimError::DoubleRelease {
                request_id: branch.request_id,
                branch_index: branch.branch_index,
            });
        }
        branch.kv_released = true;
        self.ledger
            .release_branch(branch.request_id, branch.tokens_decoded);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{LengthParams, OutcomeSource, ScriptedOutcomes};

    fn request(id: RequestId, prompt_len: u64) -> Request {
        Request {
            id,
            arrival_ms: 0,
            prompt_len,
            p_correct: 1.0,
            length: LengthParams::default(),
        }
    }

    fn scripted(entries: &[(RequestId, u32, u64)]) -> OutcomeSource {
        let mut outcomes = ScriptedOutcomes::default();
        for &(req, j, len) in entries {
            outcomes.script(req, j, len, 0, 0.9, &[]);
        }
        OutcomeSource::Scripted(outcomes)
    }

    #[test]
    fn default_config_matches_documented_values() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.chunk_steps, 400);
        assert_eq!(cfg.kv_budget_tokens, 2_000_000);
        assert_eq!(cfg.prefill_cost_ms(500), 50);
        // t_step(10) = 2 + 0.05 * 10 = 2.5ms; 400 steps -> 1000ms.
        assert_eq!(cfg.chunk_cost_ms(10), 1000);
    }

    #[test]
    fn prefill_charges_and_creates_queued_branches() {
        let mut engine = Engine::new(EngineConfig::default());
        let req = request(0, 500);
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 800), (0, 1, 800), (0, 2, 800), (0, 3, 800),
                                (0, 4, 800), (0, 5, 800), (0, 6, 800), (0, 7, 800)]);
        let adm = engine
            .charge_prefill(&req, 8, &source, &mut branches)
            .unwrap();
        assert_eq!(adm, Admission::Admitted { first_branch: 0 });
        assert_eq!(engine.now(), 50);
        assert_eq!(branches.len(), 8);
        assert!(branches.iter().all(|b| b.state == BranchState::Queued));
        // One shared prefix entry, counted once.
        assert_eq!(engine.ledger.total_resident(), 500);
    }

    #[test]
    fn equal_prompts_get_equal_but_separate_prefix_charges() {
        let mut engine = Engine::new(EngineConfig::default());
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 400), (1, 0, 400)]);
        engine
            .charge_prefill(&request(0, 300), 1, &source, &mut branches)
            .unwrap();
        engine
            .charge_prefill(&request(1, 300), 1, &source, &mut branches)
            .unwrap();
        assert_eq!(engine.ledger.resident_of(0), 300);
        assert_eq!(engine.ledger.resident_of(1), 300);
        assert_eq!(engine.ledger.total_resident(), 600);
    }

    #[test]
    fn refused_admission_charges_nothing() {
        let mut engine = Engine::new(EngineConfig {
            kv_budget_tokens: 400,
            ..EngineConfig::default()
        });
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 400), (1, 0, 400)]);
        engine
            .charge_prefill(&request(0, 300), 1, &source, &mut branches)
            .unwrap();
        let t = engine.now();
        let adm = engine
            .charge_prefill(&request(1, 300), 1, &source, &mut branches)
            .unwrap();
        assert_eq!(adm, Admission::Refused);
        assert_eq!(engine.now(), t);
        assert_eq!(branches.len(), 1);
    }

    #[test]
    fn chunk_decodes_up_to_remaining_and_flags_completions() {
        let mut engine = Engine::new(EngineConfig::default());
        let req = request(0, 100);
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 100), (0, 1, 900)]);
        engine
            .charge_prefill(&req, 2, &source, &mut branches)
            .unwrap();
        for b in &mut branches {
            b.state = BranchState::Running;
        }
        let completions = engine.decode_chunk(&mut branches, &[0, 1]).unwrap();
        assert_eq!(branches[0].tokens_decoded, 100);
        assert_eq!(branches[1].tokens_decoded, 400);
        assert_eq!(
            completions,
            vec![Completion {
                branch: 0,
                steps_in_chunk: 100
            }]
        );
    }

    #[test]
    fn chunk_cost_uses_batch_size_at_start() {
        let mut engine = Engine::new(EngineConfig::default());
        let mut branches = Vec::new();
        let source = scripted(&[
            (0, 0, 100), (0, 1, 500), (0, 2, 500), (0, 3, 500), (0, 4, 500),
            (0, 5, 500), (0, 6, 500), (0, 7, 500), (0, 8, 500), (0, 9, 500),
        ]);
        engine
            .charge_prefill(&request(0, 0), 10, &source, &mut branches)
            .unwrap();
        for b in &mut branches {
            b.state = BranchState::Running;
        }
        let t0 = engine.now();
        let batch: Vec<BranchId> = (0..10).collect();
        engine.decode_chunk(&mut branches, &batch).unwrap();
        // A mid-chunk completion does not shrink the charged batch.
        assert_eq!(engine.now() - t0, 1000);
    }

    #[test]
    fn batch_contract_violations() {
        let mut engine = Engine::new(EngineConfig {
            batch_size: 1,
            ..EngineConfig::default()
        });
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 500), (0, 1, 500)]);
        engine
            .charge_prefill(&request(0, 10), 2, &source, &mut branches)
            .unwrap();
        assert_eq!(
            engine.decode_chunk(&mut branches, &[0, 1]),
            Err(SimError::BatchOverflow { got: 2, max: 1 })
        );
        assert_eq!(
            engine.decode_chunk(&mut branches, &[]),
            Err(SimError::InvalidBatch)
        );
        // Queued (not Running) branches are not decodable.
        assert_eq!(
            engine.decode_chunk(&mut branches, &[0]),
            Err(SimError::InvalidBatch)
        );
    }

    #[test]
    fn release_order_and_prefix_semantics() {
        let mut engine = Engine::new(EngineConfig::default());
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 100), (0, 1, 400)]);
        engine
            .charge_prefill(&request(0, 200), 2, &source, &mut branches)
            .unwrap();
        for b in &mut branches {
            b.state = BranchState::Running;
        }
        engine.decode_chunk(&mut branches, &[0, 1]).unwrap();
        assert_eq!(engine.ledger.total_resident(), 200 + 100 + 400);

        // Non-last branch: only its decoded tokens are freed.
        branches[0].state = BranchState::Completed;
        engine.release_branch(&mut branches[0]).unwrap();
        assert_eq!(engine.ledger.total_resident(), 200 + 400);

        // Double release is a contract violation.
        assert_eq!(
            engine.release_branch(&mut branches[0]),
            Err(SimError::DoubleRelease {
                request_id: 0,
                branch_index: 0
            })
        );

        // Releasing a non-terminal branch is a contract violation.
        assert_eq!(
            engine.release_branch(&mut branches[1]),
            Err(SimError::ReleaseNonTerminal {
                request_id: 0,
                branch_index: 1
            })
        );

        // Last branch: decoded tokens plus the shared prefix are freed.
        branches[1].state = BranchState::EarlyStopped;
        engine.release_branch(&mut branches[1]).unwrap();
        assert_eq!(engine.ledger.total_resident(), 0);
    }

    #[test]
    fn residency_integral_accumulates_per_request() {
        let mut engine = Engine::new(EngineConfig {
            prefill_ms_per_token: 0.0,
            ..EngineConfig::default()
        });
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 400)]);
        engine
            .charge_prefill(&request(0, 100), 1, &source, &mut branches)
            .unwrap();
        branches[0].state = BranchState::Running;
        // 100 prefix tokens resident during the whole 1st chunk.
        engine.decode_chunk(&mut branches, &[0]).unwrap();
        let chunk_ms = engine.config.chunk_cost_ms(1);
        assert_eq!(engine.ledger.token_ms_of(0), 100 * chunk_ms);
        branches[0].state = BranchState::Completed;
        engine.release_branch(&mut branches[0]).unwrap();
        // Integral survives release.
        assert_eq!(engine.ledger.token_ms_of(0), 100 * chunk_ms);
    }

    #[test]
    fn audit_detects_consistency() {
        let mut engine = Engine::new(EngineConfig::default());
        let req = request(0, 200);
        let mut branches = Vec::new();
        let source = scripted(&[(0, 0, 600), (0, 1, 600)]);
        engine
            .charge_prefill(&req, 2, &source, &mut branches)
            .unwrap();
        for b in &mut branches {
            b.state = BranchState::Running;
        }
        engine.decode_chunk(&mut branches, &[0, 1]).unwrap();
        let live = branches
            .iter()
            .filter(|b| !b.state.is_terminal())
            .map(|b| (&req, b.tokens_decoded));
        engine.ledger.audit(live, engine.now()).unwrap();
        // A stale view (missing one branch) must be flagged.
        let stale = branches[..1].iter().map(|b| (&req, b.tokens_decoded));
        assert!(matches!(
            engine.ledger.audit(stale, engine.now()),
            Err(SimError::LedgerAuditMismatch { .. })
        ));
    }
}
