//! Ground-truth policy evaluation and the optimality metric.
//!
//! Values are computed from the closed-form `E[r | x, a]`, not sampled
//! rewards, so method comparisons carry no evaluation noise beyond the
//! shared context sample.

use ndarray::Array2;
use thiserror::Error;

use crate::policies::ActionPolicy;
use crate::rng::ChaCha8Rng;
use crate::synthetic_env::SyntheticEnv;
use crate::types::{ActionSet, Context};

/// Contexts evaluated per policy unless a caller overrides it.
pub const DEFAULT_N_EVAL: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate environment: optimal and uniform values coincide at {0}")]
    DegenerateEnvironment(f64),
}

/// Evaluation summary for one policy.
#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub value: f64,
    pub std_err: f64,
    pub n_eval: usize,
    pub optimal_value: f64,
    pub uniform_value: f64,
    pub optimality: f64,
    pub seed: u64,
}

/// A frozen context sample with its expected-reward table, shared across all
/// policies of one experiment so comparisons are paired.
pub struct EvalSet {
    pub contexts: Vec<Context>,
    /// `n_eval x |A|` closed-form expected rewards.
    pub rewards: Array2<f64>,
    pub uniform_value: f64,
    pub optimal_value: f64,
    pub seed: u64,
}

impl EvalSet {
    pub fn new(env: &SyntheticEnv, action_set: &ActionSet, n_eval: usize, seed: u64) -> Self {
        assert!(n_eval >= 1);
        let mut rng = crate::rng::stream(seed, "eval-contexts");
        let contexts: Vec<Context> = (0..n_eval).map(|_| env.sample_context(&mut rng)).collect();
        let rewards = env.expected_reward_table(&contexts, action_set);
        let n_actions = action_set.len() as f64;
        let uniform_value = rewards.iter().sum::<f64>() / (n_eval as f64 * n_actions);
        let optimal_value = rewards
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / n_eval as f64;
        Self { contexts, rewards, uniform_value, optimal_value, seed }
    }

    /// Mean and standard error of `sum_a pi(a|x) E[r|x,a]` over the sample.
    pub fn value_of(&self, policy: &dyn ActionPolicy) -> (f64, f64) {
        let prepared = policy.prepare();
        let n = self.contexts.len();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (i, x) in self.contexts.iter().enumerate() {
            let probs = prepared.probs(x);
            let v = probs.dot(&self.rewards.row(i));
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = if n > 1 { ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0) } else { 0.0 };
        (mean, (var / n as f64).sqrt())
    }

    pub fn report(&self, policy: &dyn ActionPolicy) -> Result<EvalReport, EvalError> {
        let (value, std_err) = self.value_of(policy);
        let opt = optimality(value, self.optimal_value, self.uniform_value)?;
        Ok(EvalReport {
            value,
            std_err,
            n_eval: self.contexts.len(),
            optimal_value: self.optimal_value,
            uniform_value: self.uniform_value,
            optimality: opt,
            seed: self.seed,
        })
    }
}

/// Draws `n_eval` fresh contexts and returns the policy's exact value with
/// its standard error over the context sample.
pub fn policy_value(
    env: &SyntheticEnv,
    policy: &dyn ActionPolicy,
    n_eval: usize,
    seed: u64,
) -> (f64, f64) {
    EvalSet::new(env, policy.action_set(), n_eval, seed).value_of(policy)
}

/// Mean over contexts of `max_a E[r | x, a]`.
pub fn optimal_value(env: &SyntheticEnv, action_set: &ActionSet, n_eval: usize, seed: u64) -> f64 {
    EvalSet::new(env, action_set, n_eval, seed).optimal_value
}

/// `(v - v_unif) / (v_opt - v_unif)`; negative means worse than uniform.
pub fn optimality(v: f64, v_opt: f64, v_unif: f64) -> Result<f64, EvalError> {
    if v_opt == v_unif {
        return Err(EvalError::DegenerateEnvironment(v_opt));
    }
    Ok((v - v_unif) / (v_opt - v_unif))
}

/// Convenience wrapper used by tests that only need a seeded generator.
pub fn sample_contexts(env: &SyntheticEnv, n: usize, rng: &mut ChaCha8Rng) -> Vec<Context> {
    (0..n).map(|_| env.sample_context(rng)).collect()
}
