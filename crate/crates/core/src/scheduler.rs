//! Policy layer: the chunk-driven scheduling loop with redundant sampling,
//! early stopping, and two-phase reward pruning, plus the vanilla and
//! self-consistency baselines.
//!
//! One iteration of the loop fills the decode batch (awaiting branches
//! first, then prefill of arrived requests in FCFS order), decodes one chunk,
//! and then does per-request bookkeeping: collect completions, raise the
//! pruning threshold on the first completion, prune low-reward branches, and
//! finalize once enough branches completed or none remain.
//!
//! Tie-breaking everywhere is by ascending branch index: first-completion
//! selection, pruning order, reward argmax, and majority ties. A branch's
//! reward at a checkpoint comes from its materialized trajectory; the
//! threshold raised on first completion uses that branch's final reward.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::{
    Admission, Branch, BranchId, BranchState, Completion, Engine, EngineConfig,
};
use crate::error::{ConfigError, SimError};
use crate::metrics::{BranchSummary, OccupancySample, RequestRecord};
use crate::workload::{OutcomeSource, Request, RequestId};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Vanilla,
    #[serde(alias = "sc")]
    SelfConsistency,
    Sart,
    #[serde(alias = "sartnoprune")]
    SartNoPrune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    HighestReward,
    MajorityVote,
    Single,
}

/// Resolved policy parameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    /// Branches sampled per request.
    pub n: u32,
    /// Completions that trigger early stopping.
    pub m: u32,
    /// Exploration pruning threshold.
    pub alpha: Real,
    /// Exploration cap on pruned branches.
    pub beta: u32,
    pub aggregation: Aggregation,
}

impl PolicyConfig {
    pub fn vanilla() -> Self {
        Self {
            policy: PolicyKind::Vanilla,
            n: 1,
            m: 1,
            alpha: 0.0,
            beta: 0,
            aggregation: Aggregation::Single,
        }
    }

    pub fn self_consistency(n: u32) -> Self {
        Self {
            policy: PolicyKind::SelfConsistency,
            n,
            m: n,
            alpha: 0.0,
            beta: 0,
            aggregation: Aggregation::MajorityVote,
        }
    }

    pub fn sart(n: u32, m: u32, alpha: Real, beta: u32) -> Self {
        Self {
            policy: PolicyKind::Sart,
            n,
            m,
            alpha,
            beta,
            aggregation: Aggregation::HighestReward,
        }
    }

    pub fn sart_no_prune(n: u32, m: u32) -> Self {
        Self {
            policy: PolicyKind::SartNoPrune,
            n,
            m,
            alpha: 0.0,
            beta: 0,
            aggregation: Aggregation::HighestReward,
        }
    }

    /// Whether this policy evaluates rewards and prunes.
    pub fn prunes(&self) -> bool {
        matches!(self.policy, PolicyKind::Sart)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 1 {
            return Err(ConfigError::new("policy.n", "must be >= 1"));
        }
        if self.m < 1 || self.m > self.n {
            return Err(ConfigError::new(
                "policy.m",
                format!("must satisfy 1 <= m <= n (m={}, n={})", self.m, self.n),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::new("policy.alpha", "must lie in [0, 1]"));
        }
        if self.beta > self.n.saturating_sub(1) {
            return Err(ConfigError::new(
                "policy.beta",
                format!("must satisfy 0 <= beta <= n - 1 (beta={}, n={})", self.beta, self.n),
            ));
        }
        if self.policy == PolicyKind::Vanilla && (self.n != 1 || self.m != 1) {
            return Err(ConfigError::new("policy.n", "vanilla forces n = m = 1"));
        }
        if self.policy == PolicyKind::SelfConsistency && self.m != self.n {
            return Err(ConfigError::new(
                "policy.m",
                "self-consistency waits for all n completions (m must equal n)",
            ));
        }
        if self.aggregation == Aggregation::Single && self.n != 1 {
            return Err(ConfigError::new(
                "policy.aggregation",
                "single aggregation requires n = 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Explore,
    Exploit,
}

/// Per-request bookkeeping: pruning phase, threshold, and counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestMeta {
    pub phase: Phase,
    pub threshold: Real,
    pub max_num_pruned: u32,
    pub num_completed: u32,
    pub num_pruned: u32,
}

impl RequestMeta {
    fn explore(policy: &PolicyConfig) -> Self {
        Self {
            phase: Phase::Explore,
            threshold: policy.alpha,
            max_num_pruned: policy.beta,
            num_completed: 0,
            num_pruned: 0,
        }
    }
}

/// How the final answer was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chosen {
    /// A specific branch's answer (reward ranking or single branch).
    Branch(u32),
    /// A consensus label (majority voting).
    Consensus(u32),
}

/// A request's final response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub request_id: RequestId,
    pub chosen: Chosen,
    pub label: u32,
    pub is_correct: bool,
    pub finalize_ms: u64,
}

/// Everything the simulation did, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Prefill {
        t_start: u64,
        t_end: u64,
        request_id: RequestId,
        branches: u32,
    },
    AdmissionRefused {
        t: u64,
        request_id: RequestId,
    },
    BranchStarted {
        t: u64,
        request_id: RequestId,
        branch_index: u32,
    },
    ChunkStart {
        t: u64,
        batch_size: usize,
    },
    ThresholdRaised {
        t: u64,
        request_id: RequestId,
        threshold: Real,
    },
    BranchCompleted {
        t: u64,
        request_id: RequestId,
        branch_index: u32,
        length: u64,
    },
    BranchPruned {
        t: u64,
        request_id: RequestId,
        branch_index: u32,
        tokens_decoded: u64,
        reward: Real,
    },
    BranchEarlyStopped {
        t: u64,
        request_id: RequestId,
        branch_index: u32,
        tokens_decoded: u64,
    },
    Finalized {
        t: u64,
        request_id: RequestId,
        label: u32,
        is_correct: bool,
    },
    ChunkEnd {
        t: u64,
        running_branches: u64,
        resident_tokens: u64,
    },
    ClockJumped {
        from: u64,
        to: u64,
    },
}

/// Output of one simulation run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// One record per request, sorted by request id.
    pub records: Vec<RequestRecord>,
    pub responses: Vec<FinalResponse>,
    pub trace: Vec<TraceEvent>,
    pub occupancy: Vec<OccupancySample>,
}

struct RequestSlot {
    request: Request,
    meta: Option<RequestMeta>,
    branch_ids: Vec<BranchId>,
    prefill_start: Option<u64>,
    finalized: bool,
}

/// One single-threaded, deterministic simulation run.
pub struct Simulation {
    policy: PolicyConfig,
    engine: Engine,
    source: OutcomeSource,
    slots: Vec<RequestSlot>,
    branches: Vec<Branch>,
    /// FCFS prefill cursor into `slots`.
    next_prefill: usize,
    branch_queue: VecDeque<BranchId>,
    batch: Vec<BranchId>,
    trace: Vec<TraceEvent>,
    records: Vec<RequestRecord>,
    responses: Vec<FinalResponse>,
    finalized: usize,
}

impl Simulation {
    pub fn new(
        policy: PolicyConfig,
        engine_config: EngineConfig,
        requests: Vec<Request>,
        source: OutcomeSource,
    ) -> Result<Self, ConfigError> {
        policy.validate()?;
        engine_config.validate()?;
        for (i, r) in requests.iter().enumerate() {
            if r.id != i as RequestId {
                return Err(ConfigError::new(
                    "requests",
                    format!("request ids must be dense and in order (saw id {} at {i})", r.id),
                ));
            }
            if i > 0 && r.arrival_ms < requests[i - 1].arrival_ms {
                return Err(ConfigError::new(
                    "requests",
                    "arrival times must be non-decreasing",
                ));
            }
            if r.prompt_len > engine_config.kv_budget_tokens {
                return Err(ConfigError::new(
                    "engine.kv_budget_tokens",
                    format!(
                        "prompt of request {} ({} tokens) can never be admitted",
                        r.id, r.prompt_len
                    ),
                ));
            }
        }
        let slots = requests
            .into_iter()
            .map(|request| RequestSlot {
                request,
                meta: None,
                branch_ids: Vec::new(),
                prefill_start: None,
                finalized: false,
            })
            .collect();
        Ok(Self {
            policy,
            engine: Engine::new(engine_config),
            source,
            slots,
            branches: Vec::new(),
            next_prefill: 0,
            branch_queue: VecDeque::new(),
            batch: Vec::new(),
            trace: Vec::new(),
            records: Vec::new(),
            responses: Vec::new(),
            finalized: 0,
        })
    }

    /// Run to completion: every request finalized, every KV token released.
    pub fn run(mut self) -> Result<RunResult, SimError> {
        loop {
            self.fill_batch()?;
            if self.batch.is_empty() {
                if self.finalized == self.slots.len() {
                    break;
                }
                // Idle: jump to the next arrival.
                match self.slots.get(self.next_prefill).map(|s| s.request.arrival_ms) {
                    Some(t) if t > self.engine.now() => {
                        let from = self.engine.now();
                        self.engine.jump_to(t)?;
                        self.trace.push(TraceEvent::ClockJumped { from, to: t });
                    }
                    _ => return Err(SimError::Stalled(self.engine.now())),
                }
                continue;
            }
            self.trace.push(TraceEvent::ChunkStart {
                t: self.engine.now(),
                batch_size: self.batch.len(),
            });
            let completions = self.engine.decode_chunk(&mut self.branches, &self.batch)?;
            self.chunk_bookkeeping(completions)?;
            self.batch
                .retain(|&id| !self.branches[id].state.is_terminal());
            self.trace.push(TraceEvent::ChunkEnd {
                t: self.engine.now(),
                running_branches: self.batch.len() as u64,
                resident_tokens: self.engine.ledger.total_resident(),
            });
            self.audit()?;
        }
        debug_assert_eq!(self.engine.ledger.total_resident(), 0);
        self.records.sort_by_key(|r| r.request_id);
        self.responses.sort_by_key(|r| r.request_id);
        let occupancy = self
            .trace
            .iter()
            .filter_map(|e| match *e {
                TraceEvent::ChunkEnd {
                    t,
                    running_branches,
                    resident_tokens,
                } => Some(OccupancySample {
                    time_ms: t,
                    running_branches,
                    resident_tokens,
                }),
                _ => None,
            })
            .collect();
        Ok(RunResult {
            records: self.records,
            responses: self.responses,
            trace: self.trace,
            occupancy,
        })
    }

    /// Fill the batch: awaiting branches first, then prefill arrived
    /// requests in arrival order. A refused admission blocks the head of the
    /// request queue (no reordering) until residency drops.
    fn fill_batch(&mut self) -> Result<(), SimError> {
        while self.batch.len() < self.engine.config.batch_size {
            if let Some(id) = self.branch_queue.pop_front() {
                let now = self.engine.now();
                let branch = &mut self.branches[id];
                debug_assert_eq!(branch.state, BranchState::Queued);
                branch.state = BranchState::Running;
                branch.start_ms = Some(now);
                self.trace.push(TraceEvent::BranchStarted {
                    t: now,
                    request_id: branch.request_id,
                    branch_index: branch.branch_index,
                });
                self.batch.push(id);
            } else if self
                .slots
                .get(self.next_prefill)
                .is_some_and(|s| s.request.arrival_ms <= self.engine.now())
            {
                let slot_idx = self.next_prefill;
                let request = self.slots[slot_idx].request.clone();
                let t_start = self.engine.now();
                match self.engine.charge_prefill(
                    &request,
                    self.policy.n,
                    &self.source,
                    &mut self.branches,
                )? {
                    Admission::Admitted { first_branch } => {
                        let t_end = self.engine.now();
                        let ids: Vec<BranchId> =
                            (first_branch..first_branch + self.policy.n as usize).collect();
                        self.branch_queue.extend(&ids);
                        let slot = &mut self.slots[slot_idx];
                        slot.prefill_start = Some(t_start);
                        slot.meta = Some(RequestMeta::explore(&self.policy));
                        slot.branch_ids = ids;
                        self.next_prefill += 1;
                        self.trace.push(TraceEvent::Prefill {
                            t_start,
                            t_end,
                            request_id: request.id,
                            branches: self.policy.n,
                        });
                    }
                    Admission::Refused => {
                        self.trace.push(TraceEvent::AdmissionRefused {
                            t: t_start,
                            request_id: request.id,
                        });
                        break;
                    }
                }
            } else {
                break;
            }
        }
        Ok(())
    }

    /// Per-request bookkeeping after a decode chunk, in ascending request-id
    /// order over the requests that had a branch in the chunk.
    fn chunk_bookkeeping(&mut self, completions: Vec<Completion>) -> Result<(), SimError> {
        let mut completed_by_request: BTreeMap<RequestId, Vec<Completion>> = BTreeMap::new();
        for c in completions {
            completed_by_request
                .entry(self.branches[c.branch].request_id)
                .or_default()
                .push(c);
        }
        let involved: BTreeSet<RequestId> = self
            .batch
            .iter()
            .map(|&id| self.branches[id].request_id)
            .collect();
        let mut prm_evals = 0u64;
        for request_id in involved {
            let completed = completed_by_request.remove(&request_id).unwrap_or_default();
            prm_evals += self.request_bookkeeping(request_id, completed)?;
        }
        let prm_cost = self.engine.config.prm_cost_ms(prm_evals);
        if prm_cost > 0 {
            self.engine.advance(prm_cost);
        }
        Ok(())
    }

    fn request_bookkeeping(
        &mut self,
        request_id: RequestId,
        completed: Vec<Completion>,
    ) -> Result<u64, SimError> {
        let now = self.engine.now();
        let slot_idx = request_id as usize;

        // Phase switch precedes pruning: a completion this chunk means the
        // surviving branches are judged against the new threshold below.
        if self.policy.prunes() && !completed.is_empty() {
            let meta = self.slots[slot_idx].meta.as_mut().expect("prefilled");
            if meta.phase == Phase::Explore {
                let earliest = completed
                    .iter()
                    .min_by_key(|c| (c.steps_in_chunk, self.branches[c.branch].branch_index))
                    .expect("non-empty");
                let threshold = self.branches[earliest.branch].outcome.final_reward;
                let meta = self.slots[slot_idx].meta.as_mut().expect("prefilled");
                meta.phase = Phase::Exploit;
                meta.threshold = threshold;
                meta.max_num_pruned = self.policy.n - 1;
                self.trace.push(TraceEvent::ThresholdRaised {
                    t: now,
                    request_id,
                    threshold,
                });
            }
        }

        // Completed branches leave the batch and release their KV.
        let mut completed_ids: Vec<BranchId> = completed.iter().map(|c| c.branch).collect();
        completed_ids.sort_by_key(|&id| self.branches[id].branch_index);
        for id in completed_ids {
            let branch = &mut self.branches[id];
            branch.state = BranchState::Completed;
            branch.end_ms = Some(now);
            let (branch_index, length) = (branch.branch_index, branch.outcome.target_length);
            self.engine.release_branch(&mut self.branches[id])?;
            self.slots[slot_idx].meta.as_mut().expect("prefilled").num_completed += 1;
            self.trace.push(TraceEvent::BranchCompleted {
                t: now,
                request_id,
                branch_index,
                length,
            });
        }

        // Prune low-reward incomplete branches of this request that were in
        // the chunk, in ascending branch-index order. The cap is checked
        // before the reward model is consulted, so a capped request costs no
        // evaluations.
        let mut evals = 0u64;
        if self.policy.prunes() {
            let mut candidates: Vec<BranchId> = self
                .batch
                .iter()
                .copied()
                .filter(|&id| {
                    let b = &self.branches[id];
                    b.request_id == request_id && b.state == BranchState::Running
                })
                .collect();
            candidates.sort_by_key(|&id| self.branches[id].branch_index);
            for id in candidates {
                let meta = self.slots[slot_idx].meta.as_ref().expect("prefilled");
                if meta.num_pruned >= meta.max_num_pruned {
                    break;
                }
                let threshold = meta.threshold;
                evals += 1;
                let reward = {
                    let b = &self.branches[id];
                    b.trajectory.reward_at(b.tokens_decoded)
                };
                if reward < threshold {
                    let branch = &mut self.branches[id];
                    branch.state = BranchState::Pruned;
                    branch.pruned_reward = Some(reward);
                    branch.end_ms = Some(now);
                    let (branch_index, tokens_decoded) =
                        (branch.branch_index, branch.tokens_decoded);
                    self.engine.release_branch(&mut self.branches[id])?;
                    self.slots[slot_idx].meta.as_mut().expect("prefilled").num_pruned += 1;
                    self.trace.push(TraceEvent::BranchPruned {
                        t: now,
                        request_id,
                        branch_index,
                        tokens_decoded,
                        reward,
                    });
                }
            }
        }

        let meta = *self.slots[slot_idx].meta.as_ref().expect("prefilled");
        debug_assert!(meta.num_pruned <= meta.max_num_pruned || !self.policy.prunes());
        if !self.slots[slot_idx].finalized
            && (meta.num_completed >= self.policy.m
                || meta.num_completed + meta.num_pruned == self.policy.n)
        {
            self.finalize_request(request_id)?;
        }
        Ok(evals)
    }

    /// Output the final response: early-stop every live branch (running or
    /// still queued; queued ones are discarded without any cost), release
    /// their KV, and record the decision.
    fn finalize_request(&mut self, request_id: RequestId) -> Result<(), SimError> {
        let now = self.engine.now();
        let slot_idx = request_id as usize;
        let branch_ids = self.slots[slot_idx].branch_ids.clone();
        for &id in &branch_ids {
            if matches!(
                self.branches[id].state,
                BranchState::Running | BranchState::Queued
            ) {
                let branch = &mut self.branches[id];
                branch.state = BranchState::EarlyStopped;
                branch.end_ms = Some(now);
                let (branch_index, tokens_decoded) = (branch.branch_index, branch.tokens_decoded);
                self.engine.release_branch(&mut self.branches[id])?;
                self.trace.push(TraceEvent::BranchEarlyStopped {
                    t: now,
                    request_id,
                    branch_index,
                    tokens_decoded,
                });
            }
        }
        self.branch_queue
            .retain(|&id| self.branches[id].state == BranchState::Queued);

        let branch_refs: Vec<&Branch> = branch_ids.iter().map(|&id| &self.branches[id]).collect();
        let (chosen, label) = decide(self.policy.aggregation, &branch_refs)
            .ok_or(SimError::EmptyFinalize(request_id))?;
        let response = FinalResponse {
            request_id,
            chosen,
            label,
            is_correct: label == 0,
            finalize_ms: now,
        };
        let slot = &mut self.slots[slot_idx];
        slot.finalized = true;
        self.finalized += 1;
        let arrival = slot.request.arrival_ms;
        let prefill_start = slot.prefill_start.expect("finalized implies prefilled");
        self.records.push(RequestRecord {
            request_id,
            arrival_ms: arrival,
            prefill_start_ms: prefill_start,
            finalize_ms: now,
            queuing_ms: prefill_start - arrival,
            inference_ms: now - prefill_start,
            e2e_ms: now - arrival,
            is_correct: response.is_correct,
            final_label: label,
            chosen_branch: match chosen {
                Chosen::Branch(j) => Some(j),
                Chosen::Consensus(_) => None,
            },
            kv_token_ms: self.engine.ledger.token_ms_of(request_id),
            branches: branch_ids
                .iter()
                .map(|&id| {
                    let b = &self.branches[id];
                    BranchSummary {
                        branch_index: b.branch_index,
                        state: b.state,
                        target_length: b.outcome.target_length,
                        tokens_decoded: b.tokens_decoded,
                    }
                })
                .collect(),
        });
        self.responses.push(response);
        self.trace.push(TraceEvent::Finalized {
            t: now,
            request_id,
            label,
            is_correct: label == 0,
        });
        Ok(())
    }

    /// Recompute the KV total from scratch and compare with the ledger.
    fn audit(&self) -> Result<(), SimError> {
        let live = self
            .branches
            .iter()
            .filter(|b| !b.state.is_terminal())
            .map(|b| (&self.slots[b.request_id as usize].request, b.tokens_decoded));
        self.engine.ledger.audit(live, self.engine.now())
    }
}

/// Select the final answer from a request's terminated branches.
///
/// Returns `None` when no branch can carry a decision. Highest-reward
/// selection falls back to the best pruned branch (by the reward observed at
/// pruning time) when nothing completed.
pub fn decide(aggregation: Aggregation, branches: &[&Branch]) -> Option<(Chosen, u32)> {
    debug_assert!(branches.windows(2).all(|w| w[0].branch_index < w[1].branch_index));
    let completed: Vec<&Branch> = branches
        .iter()
        .copied()
        .filter(|b| b.state == BranchState::Completed)
        .collect();
    match aggregation {
        Aggregation::Single => completed
            .first()
            .map(|b| (Chosen::Branch(b.branch_index), b.outcome.answer_label)),
        Aggregation::MajorityVote => {
            if completed.is_empty() {
                return None;
            }
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for b in &completed {
                *counts.entry(b.outcome.answer_label).or_insert(0) += 1;
            }
            let best = *counts.values().max().expect("non-empty");
            // Ties resolve to the label of the lowest-index tied branch.
            let winner = completed
                .iter()
                .find(|b| counts[&b.outcome.answer_label] == best)
                .expect("non-empty");
            Some((
                Chosen::Consensus(winner.outcome.answer_label),
                winner.outcome.answer_label,
            ))
        }
        Aggregation::HighestReward => {
            let mut best: Option<&Branch> = None;
            for b in &completed {
                if best.is_none_or(|cur| b.outcome.final_reward > cur.outcome.final_reward) {
                    best = Some(b);
                }
            }
            if best.is_none() {
                // Everything was pruned: use the most convincing pruned branch.
                for b in branches.iter().filter(|b| b.state == BranchState::Pruned) {
                    let reward = b.pruned_reward.expect("pruned branches carry a reward");
                    if best.is_none_or(|cur| {
                        reward > cur.pruned_reward.expect("pruned branches carry a reward")
                    }) {
                        best = Some(b);
                    }
                }
            }
            best.map(|b| (Chosen::Branch(b.branch_index), b.outcome.answer_label))
        }
    }
}
