//! Property tests: randomized scripted scenarios run end-to-end, then every
//! structural invariant of the scheduler, ledger, and metrics is checked on
//! the resulting trace and records.

use std::collections::BTreeMap;

use proptest::prelude::*;

use branchsim_core::engine::{BranchState, EngineConfig};
use branchsim_core::metrics::percentile;
use branchsim_core::scheduler::{PolicyConfig, PolicyKind, RunResult, Simulation, TraceEvent};
use branchsim_core::workload::{
    LengthParams, OutcomeSource, Request, RewardTrajectory, ScriptedOutcomes,
};

#[derive(Debug, Clone)]
struct BranchSpec {
    target_length: u64,
    answer_label: u32,
    final_reward: f64,
    reward_seed: u64,
}

#[derive(Debug, Clone)]
struct Scripted {
    policy: PolicyConfig,
    engine: EngineConfig,
    arrivals: Vec<(u64, u64)>,
    branches: Vec<Vec<BranchSpec>>,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn policy_strategy() -> impl Strategy<Value = PolicyConfig> {
    let n = 1..=5u32;
    prop_oneof![
        Just(PolicyConfig::vanilla()),
        n.clone().prop_map(PolicyConfig::self_consistency),
        n.clone()
            .prop_flat_map(|n| (Just(n), 1..=n, 0.0..=1.0f64, 0..n.max(1)))
            .prop_map(|(n, m, alpha, beta)| PolicyConfig::sart(n, m, alpha, beta)),
        n.prop_flat_map(|n| (Just(n), 1..=n))
            .prop_map(|(n, m)| PolicyConfig::sart_no_prune(n, m)),
    ]
}

fn scripted_strategy() -> impl Strategy<Value = Scripted> {
    (policy_strategy(), 1..=5usize).prop_flat_map(|(policy, n_requests)| {
        let branch = (1..=1500u64, 0..=3u32, 0.0..=1.0f64, any::<u64>()).prop_map(
            |(target_length, answer_label, final_reward, reward_seed)| BranchSpec {
                target_length,
                answer_label,
                final_reward,
                reward_seed,
            },
        );
        let branches = prop::collection::vec(
            prop::collection::vec(branch, policy.n as usize),
            n_requests,
        );
        let arrivals = prop::collection::vec((0..=3000u64, 1..=512u64), n_requests);
        let engine = (
            1..=8usize,
            prop_oneof![Just(50u64), Just(100), Just(400)],
            prop_oneof![Just(0.0f64), Just(0.1)],
            0.5..=4.0f64,
            0.0..=0.1f64,
            prop_oneof![Just(10_000_000u64), 600..=3_000u64],
            prop_oneof![Just(0.0f64), Just(0.5)],
        )
            .prop_map(
                |(batch_size, chunk_steps, prefill, base, slope, kv, prm)| EngineConfig {
                    batch_size,
                    chunk_steps,
                    prefill_ms_per_token: prefill,
                    decode_base_ms: base,
                    decode_ms_per_branch: slope,
                    kv_budget_tokens: kv,
                    prm_eval_ms: prm,
                },
            );
        (Just(policy), arrivals, branches, engine).prop_map(
            |(policy, mut arrivals, branches, engine)| {
                arrivals.sort();
                Scripted {
                    policy,
                    engine,
                    arrivals,
                    branches,
                }
            },
        )
    })
}

fn build(case: &Scripted) -> (Vec<Request>, ScriptedOutcomes) {
    let mut outcomes = ScriptedOutcomes::default();
    let mut requests = Vec::new();
    for (id, &(arrival_ms, prompt_len)) in case.arrivals.iter().enumerate() {
        requests.push(Request {
            id: id as u64,
            arrival_ms,
            prompt_len,
            p_correct: 1.0,
            length: LengthParams::default(),
        });
        for (j, spec) in case.branches[id].iter().enumerate() {
            let mut checkpoints = Vec::new();
            let mut state = spec.reward_seed;
            let mut t = case.engine.chunk_steps;
            while t < spec.target_length {
                let r = (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
                checkpoints.push((t, r));
                t += case.engine.chunk_steps;
            }
            checkpoints.push((spec.target_length, spec.final_reward));
            outcomes.insert(
                id as u64,
                j as u32,
                branchsim_core::BranchOutcome {
                    target_length: spec.target_length,
                    answer_label: spec.answer_label,
                    final_reward: spec.final_reward,
                },
                RewardTrajectory::new(0.5, checkpoints),
            );
        }
    }
    (requests, outcomes)
}

fn event_time(event: &TraceEvent) -> u64 {
    match *event {
        TraceEvent::Prefill { t_end, .. } => t_end,
        TraceEvent::AdmissionRefused { t, .. }
        | TraceEvent::BranchStarted { t, .. }
        | TraceEvent::ChunkStart { t, .. }
        | TraceEvent::ThresholdRaised { t, .. }
        | TraceEvent::BranchCompleted { t, .. }
        | TraceEvent::BranchPruned { t, .. }
        | TraceEvent::BranchEarlyStopped { t, .. }
        | TraceEvent::Finalized { t, .. }
        | TraceEvent::ChunkEnd { t, .. } => t,
        TraceEvent::ClockJumped { to, .. } => to,
    }
}

fn check_invariants(case: &Scripted, result: &RunResult) {
    let policy = &case.policy;
    let n = policy.n;

    // One record per request, latency decomposition exact.
    assert_eq!(result.records.len(), case.arrivals.len());
    for (i, r) in result.records.iter().enumerate() {
        assert_eq!(r.request_id, i as u64);
        assert_eq!(r.e2e_ms, r.queuing_ms + r.inference_ms);
        assert_eq!(r.arrival_ms, case.arrivals[i].0);
        assert!(r.prefill_start_ms >= r.arrival_ms);
        assert!(r.finalize_ms >= r.prefill_start_ms);
        assert_eq!(r.branches.len(), n as usize);

        let completed = r.branches.iter().filter(|b| b.state == BranchState::Completed).count() as u32;
        let pruned = r.branches.iter().filter(|b| b.state == BranchState::Pruned).count() as u32;
        // Finalization condition of the bookkeeping loop held.
        assert!(
            completed >= policy.m || completed + pruned == n,
            "request {i}: completed {completed}, pruned {pruned}"
        );
        // The exploration cap plus the exploitation cap of n-1 bound pruning;
        // with beta <= n-1 at least one branch always completes.
        assert!(pruned <= n.saturating_sub(1).max(policy.beta));
        if policy.beta < n {
            assert!(completed >= 1);
        }
        assert!(completed <= policy.m + case.engine.batch_size as u32);

        for b in &r.branches {
            assert!(b.state.is_terminal());
            match b.state {
                BranchState::Completed => assert_eq!(b.tokens_decoded, b.target_length),
                BranchState::Pruned => {
                    // Queued branches are never pruned: a pruned branch ran
                    // at least one chunk.
                    assert!(b.tokens_decoded > 0);
                    assert!(b.tokens_decoded < b.target_length);
                }
                BranchState::EarlyStopped => assert!(b.tokens_decoded < b.target_length),
                _ => unreachable!("non-terminal state in record"),
            }
        }
        if !policy.prunes() {
            assert_eq!(pruned, 0, "non-pruning policy pruned a branch");
        }
        if policy.policy == PolicyKind::SelfConsistency {
            assert_eq!(completed, n, "self-consistency finalizes on all completions");
        }
    }

    // Clock never moves backward across the trace.
    let mut now = 0;
    for event in &result.trace {
        let t = event_time(event);
        assert!(t >= now, "clock moved backward at {event:?}");
        now = t;
    }

    // Phase transitions happen at most once per request, and prefill order
    // is FCFS (arrival order).
    let mut raised: BTreeMap<u64, usize> = BTreeMap::new();
    let mut prefills = Vec::new();
    let mut explore_prunes: BTreeMap<u64, u32> = BTreeMap::new();
    for event in &result.trace {
        match *event {
            TraceEvent::ThresholdRaised { request_id, .. } => {
                *raised.entry(request_id).or_insert(0) += 1;
            }
            TraceEvent::Prefill { request_id, .. } => prefills.push(request_id),
            TraceEvent::BranchPruned { request_id, .. } => {
                if !raised.contains_key(&request_id) {
                    *explore_prunes.entry(request_id).or_insert(0) += 1;
                }
            }
            TraceEvent::ChunkStart { batch_size, .. } => {
                assert!(batch_size >= 1 && batch_size <= case.engine.batch_size);
            }
            _ => {}
        }
    }
    assert!(raised.values().all(|&c| c <= 1), "phase raised twice");
    let mut sorted = prefills.clone();
    sorted.sort_unstable();
    assert_eq!(prefills, sorted, "prefill order violates FCFS");
    // Exploration-phase pruning respects the beta cap.
    assert!(explore_prunes.values().all(|&c| c <= policy.beta));

    // Ledger fully drained; occupancy within the batch bound.
    let last = result.occupancy.last().unwrap();
    assert_eq!(last.resident_tokens, 0);
    assert!(result
        .occupancy
        .iter()
        .all(|s| s.running_branches <= case.engine.batch_size as u64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn random_scripted_runs_hold_all_invariants(case in scripted_strategy()) {
        let (requests, outcomes) = build(&case);
        let result = Simulation::new(
            case.policy,
            case.engine,
            requests.clone(),
            OutcomeSource::Scripted(outcomes.clone()),
        )
        .expect("valid")
        .run()
        .expect("runs to completion with passing audits");
        check_invariants(&case, &result);

        // Replays are exact.
        let again = Simulation::new(
            case.policy,
            case.engine,
            requests,
            OutcomeSource::Scripted(outcomes),
        )
        .expect("valid")
        .run()
        .expect("replay");
        prop_assert_eq!(&result.records, &again.records);
        prop_assert_eq!(&result.trace, &again.trace);
    }

    #[test]
    fn percentile_matches_naive_rank_and_is_monotone(
        mut values in prop::collection::vec(0..10_000u64, 1..200),
        p1 in 0.0001f64..=100.0,
        p2 in 0.0001f64..=100.0,
    ) {
        let v1 = percentile(&values, p1).unwrap();
        // Oracle: sort and index by ceil(p/100 * n) directly.
        values.sort_unstable();
        let rank = ((p1 / 100.0) * values.len() as f64).ceil() as usize;
        prop_assert_eq!(v1, values[rank.max(1) - 1]);
        let v2 = percentile(&values, p2).unwrap();
        if p1 <= p2 {
            prop_assert!(v1 <= v2);
        } else {
            prop_assert!(v2 <= v1);
        }
    }

    #[test]
    fn reward_lookup_matches_stored_map(
        prior in 0.0..=1.0f64,
        raw in prop::collection::btree_map(1..5_000u64, 0.0..=1.0f64, 1..40),
        queries in prop::collection::vec(0..6_000u64, 1..50),
    ) {
        let checkpoints: Vec<(u64, f64)> = raw.iter().map(|(&t, &r)| (t, r)).collect();
        let traj = RewardTrajectory::new(prior, checkpoints);
        for q in queries {
            let expected = raw.range(..=q).next_back().map(|(_, &r)| r).unwrap_or(prior);
            prop_assert_eq!(traj.reward_at(q), expected);
        }
    }
}
