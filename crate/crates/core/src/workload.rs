//! Request stream and the stochastic oracles that stand in for the model
//! and the process reward model: per-branch response lengths, answer labels,
//! and reward trajectories.
//!
//! Calibration choices worth knowing before reading the code:
//!
//! - Branch lengths are lognormal per request (heavy right tail), truncated
//!   by resampling into `[min_tokens, max_tokens]`.
//! - The answer label is drawn independently of the length, so length and
//!   correctness are uncorrelated by construction.
//! - Final rewards are informative of correctness (separated means);
//!   intermediate checkpoint rewards are the final reward plus noise that
//!   shrinks as decoding approaches the target length.
//! - Checkpoints are materialized at every multiple of the scheduler's
//!   chunk length plus the final token, since rewards are only consulted at
//!   chunk boundaries.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::ConfigError;
use crate::rng::RngStream;
use crate::Real;

pub type RequestId = u64;

/// Parameters of a request's branch-length distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthParams {
    #[serde(default = "default_length_median")]
    pub median_tokens: Real,
    #[serde(default = "default_length_sigma")]
    pub sigma_log: Real,
    #[serde(default = "default_length_min")]
    pub min_tokens: u64,
    #[serde(default = "default_length_max")]
    pub max_tokens: u64,
}

fn default_length_median() -> Real {
    8_000.0
}
fn default_length_sigma() -> Real {
    0.5
}
fn default_length_min() -> u64 {
    256
}
fn default_length_max() -> u64 {
    32_768
}

impl Default for LengthParams {
    fn default() -> Self {
        Self {
            median_tokens: default_length_median(),
            sigma_log: default_length_sigma(),
            min_tokens: default_length_min(),
            max_tokens: default_length_max(),
        }
    }
}

impl LengthParams {
    /// CDF of the truncated lognormal length distribution.
    pub fn cdf(&self, x: Real) -> Real {
        let a = self.min_tokens as Real;
        let b = self.max_tokens as Real;
        if x < a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        let std_normal = statrs::distribution::Normal::standard();
        let z = |v: Real| (v.ln() - self.median_tokens.ln()) / self.sigma_log;
        let lo = std_normal.cdf(z(a));
        let hi = std_normal.cdf(z(b));
        ((std_normal.cdf(z(x)) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// An arriving job.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ms: u64,
    pub prompt_len: u64,
    /// Probability that any one branch answers correctly.
    pub p_correct: Real,
    pub length: LengthParams,
}

/// One sampled reasoning trajectory's latent outcome: how long it will run,
/// whether it lands on the correct answer (label 0) or one of the distinct
/// wrong answers (1..=k), and the reward its completed form earns.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutcome {
    pub target_length: u64,
    pub answer_label: u32,
    pub final_reward: Real,
}

/// Reward values materialized at decode checkpoints.
///
/// The value at the final checkpoint equals the branch's final reward
/// exactly; queries between checkpoints return the value at the greatest
/// checkpoint at or below the queried token count, and the configured prior
/// before the first checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrajectory {
    prior: Real,
    /// (decoded-token count, reward), strictly increasing in tokens.
    checkpoints: Vec<(u64, Real)>,
}

impl RewardTrajectory {
    pub fn new(prior: Real, checkpoints: Vec<(u64, Real)>) -> Self {
        debug_assert!(
            checkpoints.windows(2).all(|w| w[0].0 < w[1].0),
            "checkpoints must be strictly increasing in token count"
        );
        debug_assert!(
            checkpoints
                .iter()
                .all(|&(_, r)| (0.0..=1.0).contains(&r))
                && (0.0..=1.0).contains(&prior),
            "rewards must lie in [0, 1]"
        );
        Self { prior, checkpoints }
    }

    pub fn reward_at(&self, tokens_decoded: u64) -> Real {
        match self
            .checkpoints
            .partition_point(|&(tokens, _)| tokens <= tokens_decoded)
        {
            0 => self.prior,
            idx => self.checkpoints[idx - 1].1,
        }
    }

    pub fn final_reward(&self) -> Real {
        self.checkpoints
            .last()
            .map(|&(_, r)| r)
            .unwrap_or(self.prior)
    }

    pub fn checkpoints(&self) -> &[(u64, Real)] {
        &self.checkpoints
    }
}

/// Calibration of the request stream and the branch oracles. Every field is
/// a simulator choice, exposed in the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub prompt_len_min: u64,
    pub prompt_len_max: u64,
    pub length: LengthParams,
    /// Per-request p_correct is Beta(difficulty_alpha, difficulty_beta).
    pub difficulty_alpha: Real,
    pub difficulty_beta: Real,
    /// Number of distinct wrong answer labels (1..=wrong_labels).
    pub wrong_labels: u32,
    pub reward_correct_mean: Real,
    pub reward_correct_sd: Real,
    pub reward_incorrect_mean: Real,
    pub reward_incorrect_sd: Real,
    /// Checkpoint noise scale; noise shrinks linearly to zero at completion.
    pub traj_sigma: Real,
    /// Reward reported before the first checkpoint.
    pub reward_prior: Real,
    /// Required gap between correct and incorrect mean rewards.
    pub min_reward_separation: Real,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            prompt_len_min: 64,
            prompt_len_max: 1024,
            length: LengthParams::default(),
            difficulty_alpha: 4.0,
            difficulty_beta: 2.0,
            wrong_labels: 4,
            reward_correct_mean: 0.8,
            reward_correct_sd: 0.1,
            reward_incorrect_mean: 0.4,
            reward_incorrect_sd: 0.15,
            traj_sigma: 0.15,
            reward_prior: 0.6,
            min_reward_separation: 0.3,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &str, msg: String| Err(ConfigError::new(field, msg));
        if self.prompt_len_min < 1 {
            return err("workload.prompt_len_min", "must be >= 1".into());
        }
        if self.prompt_len_max < self.prompt_len_min {
            return err(
                "workload.prompt_len_max",
                format!("must be >= prompt_len_min ({})", self.prompt_len_min),
            );
        }
        if self.length.min_tokens < 1 {
            return err("workload.length.min_tokens", "must be >= 1".into());
        }
        if self.length.max_tokens < self.length.min_tokens {
            return err(
                "workload.length.max_tokens",
                format!("must be >= min_tokens ({})", self.length.min_tokens),
            );
        }
        let (median, sigma) = (self.length.median_tokens, self.length.sigma_log);
        if !median.is_finite()
            || median < self.length.min_tokens as Real
            || median > self.length.max_tokens as Real
        {
            return err(
                "workload.length.median_tokens",
                "must lie within [min_tokens, max_tokens]".into(),
            );
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return err("workload.length.sigma_log", "must be >= 0".into());
        }
        if self.difficulty_alpha <= 0.0 || self.difficulty_beta <= 0.0 {
            return err(
                "workload.difficulty_alpha",
                "difficulty Beta parameters must be > 0".into(),
            );
        }
        if self.wrong_labels < 1 {
            return err("workload.wrong_labels", "must be >= 1".into());
        }
        for (field, value) in [
            ("workload.reward_correct_mean", self.reward_correct_mean),
            ("workload.reward_incorrect_mean", self.reward_incorrect_mean),
            ("workload.reward_prior", self.reward_prior),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return err(field, "must lie in [0, 1]".into());
            }
        }
        for (field, value) in [
            ("workload.reward_correct_sd", self.reward_correct_sd),
            ("workload.reward_incorrect_sd", self.reward_incorrect_sd),
            ("workload.traj_sigma", self.traj_sigma),
            ("workload.min_reward_separation", self.min_reward_separation),
        ] {
            if !value.is_finite() || value < 0.0 {
                return err(field, "must be >= 0".into());
            }
        }
        if self.reward_correct_mean - self.reward_incorrect_mean
            < self.min_reward_separation - 1e-9
        {
            return err(
                "workload.min_reward_separation",
                format!(
                    "correct/incorrect reward means are only {} apart",
                    self.reward_correct_mean - self.reward_incorrect_mean
                ),
            );
        }
        Ok(())
    }
}

/// Generate the request stream: Poisson arrivals at `rate_per_sec` over
/// `horizon_ms`, with per-request prompt length and difficulty draws.
///
/// Inter-arrival gaps are exponential with mean `1000 / rate_per_sec` ms,
/// quantized to whole milliseconds and floored at 1ms so arrival times are
/// strictly increasing on the integer clock.
pub fn generate_arrivals(
    config: &WorkloadConfig,
    rate_per_sec: Real,
    horizon_ms: u64,
    rng: &mut RngStream,
) -> Result<Vec<Request>, ConfigError> {
    if rate_per_sec <= 0.0 || !rate_per_sec.is_finite() {
        return Err(ConfigError::new("arrival_rate", "must be > 0"));
    }
    let gap_dist = Exp::new(rate_per_sec / 1000.0)
        .map_err(|e| ConfigError::new("arrival_rate", e.to_string()))?;
    let difficulty = Beta::new(config.difficulty_alpha, config.difficulty_beta)
        .map_err(|e| ConfigError::new("workload.difficulty_alpha", e.to_string()))?;
    let mut requests = Vec::new();
    let mut now: u64 = 0;
    loop {
        let gap_ms = (gap_dist.sample(rng).round() as u64).max(1);
        now = now.saturating_add(gap_ms);
        if now > horizon_ms {
            break;
        }
        let prompt_len = rng.random_range(config.prompt_len_min..=config.prompt_len_max);
        let p_correct = difficulty.sample(rng).clamp(0.0, 1.0);
        requests.push(Request {
            id: requests.len() as RequestId,
            arrival_ms: now,
            prompt_len,
            p_correct,
            length: config.length,
        });
    }
    Ok(requests)
}

/// Sample one branch's latent outcome for a request.
///
/// The target length and the answer label come from independent draws, so
/// correctness carries no information about length.
pub fn sample_branch_outcome(
    request: &Request,
    config: &WorkloadConfig,
    rng: &mut RngStream,
) -> BranchOutcome {
    let target_length = sample_truncated_length(&request.length, rng);
    let correct: Real = rng.random_range(0.0..1.0);
    let answer_label = if correct < request.p_correct {
        0
    } else {
        1 + rng.random_range(0..config.wrong_labels)
    };
    let (mean, sd) = if answer_label == 0 {
        (config.reward_correct_mean, config.reward_correct_sd)
    } else {
        (config.reward_incorrect_mean, config.reward_incorrect_sd)
    };
    let final_reward = sample_clipped_normal(mean, sd, rng);
    BranchOutcome {
        target_length,
        answer_label,
        final_reward,
    }
}

/// Materialize the reward trajectory for an outcome at every multiple of
/// `checkpoint_interval` tokens plus the final token.
pub fn sample_reward_trajectory(
    outcome: &BranchOutcome,
    config: &WorkloadConfig,
    checkpoint_interval: u64,
    rng: &mut RngStream,
) -> RewardTrajectory {
    debug_assert!(checkpoint_interval >= 1);
    let len = outcome.target_length;
    let mut checkpoints = Vec::with_capacity((len / checkpoint_interval + 1) as usize);
    let mut t = checkpoint_interval;
    while t < len {
        let sd = config.traj_sigma * (1.0 - t as Real / len as Real);
        let reward = sample_clipped_normal(outcome.final_reward, sd, rng);
        checkpoints.push((t, reward));
        t += checkpoint_interval;
    }
    checkpoints.push((len, outcome.final_reward));
    RewardTrajectory::new(config.reward_prior, checkpoints)
}

fn sample_truncated_length(params: &LengthParams, rng: &mut RngStream) -> u64 {
    if params.sigma_log == 0.0 {
        return (params.median_tokens.round() as u64)
            .clamp(params.min_tokens, params.max_tokens);
    }
    let dist = LogNormal::new(params.median_tokens.ln(), params.sigma_log)
        .expect("validated length params");
    let (lo, hi) = (params.min_tokens as Real, params.max_tokens as Real);
    // Truncation by resampling keeps the in-range shape exact (no clamp mass
    // at the bounds); validation guarantees the acceptance region contains
    // the median, so this terminates quickly.
    loop {
        let draw = dist.sample(rng);
        if (lo..=hi).contains(&draw) {
            return draw.round() as u64;
        }
    }
}

fn sample_clipped_normal(mean: Real, sd: Real, rng: &mut RngStream) -> Real {
    if sd == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let dist = Normal::new(mean, sd).expect("validated reward params");
    dist.sample(rng).clamp(0.0, 1.0)
}

/// Explicit per-branch outcomes for scripted (hand-traced) scenarios.
#[derive(Debug, Clone, Default)]
pub struct ScriptedOutcomes {
    branches: BTreeMap<(RequestId, u32), (BranchOutcome, RewardTrajectory)>,
}

impl ScriptedOutcomes {
    pub fn insert(
        &mut self,
        request_id: RequestId,
        branch_index: u32,
        outcome: BranchOutcome,
        trajectory: RewardTrajectory,
    ) {
        self.branches
            .insert((request_id, branch_index), (outcome, trajectory));
    }

    /// Script a branch from its target length, label, final reward, and
    /// intermediate checkpoint rewards; the final checkpoint is appended.
    pub fn script(
        &mut self,
        request_id: RequestId,
        branch_index: u32,
        target_length: u64,
        answer_label: u32,
        final_reward: Real,
        intermediate: &[(u64, Real)],
    ) {
        let outcome = BranchOutcome {
            target_length,
            answer_label,
            final_reward,
        };
        let mut checkpoints = intermediate.to_vec();
        debug_assert!(checkpoints.iter().all(|&(t, _)| t < target_length));
        checkpoints.push((target_length, final_reward));
        let trajectory = RewardTrajectory::new(0.5, checkpoints);
        self.insert(request_id, branch_index, outcome, trajectory);
    }
}

/// Where branch outcomes come from: the calibrated stochastic oracles, or a
/// scripted table for conformance tests.
#[derive(Debug, Clone)]
pub enum OutcomeSource {
    Sampled {
        root_seed: u64,
        config: WorkloadConfig,
    },
    Scripted(ScriptedOutcomes),
}

impl OutcomeSource {
    /// Outcome and trajectory for branch `branch_index` of `request`.
    ///
    /// Sampled sources draw from the branch's own stream, so the result
    /// depends only on (seed, request id, branch index).
    ///
    /// # Panics
    /// Panics if a scripted source has no entry for the branch.
    pub fn branch(
        &self,
        request: &Request,
        branch_index: u32,
        checkpoint_interval: u64,
    ) -> (BranchOutcome, RewardTrajectory) {
        match self {
            Self::Sampled { root_seed, config } => {
                let mut rng = RngStream::for_branch(*root_seed, request.id, branch_index);
                let outcome = sample_branch_outcome(request, config, &mut rng);
                let trajectory =
                    sample_reward_trajectory(&outcome, config, checkpoint_interval, &mut rng);
                (outcome, trajectory)
            }
            Self::Scripted(outcomes) => outcomes
                .branches
                .get(&(request.id, branch_index))
                .cloned()
                .unwrap_or_else(|| {
                    panic!(
                        "scripted scenario has no outcome for branch {}/{}",
                        request.id, branch_index
                    )
                }),
        }
    }
}
