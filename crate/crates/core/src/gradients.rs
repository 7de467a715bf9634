//! The six policy-gradient estimators — online, regression, IS, DR, POTEC,
//! and DSO — plus k-means action clustering for the two-stage policy.
//!
//! Every estimator returns the mean gradient over its batch. The IS family
//! clips the final scalar weight at a shared maximum; DSO's kernel-to-density
//! ratio counts as that weight. All estimators are exact expectations where
//! the formula displays one (regression's action sum, POTEC's second term)
//! and sampled elsewhere.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::kernels::{kernel_eval, KernelConfig, KernelError};
use crate::nn::MlpGrads;
use crate::policies::{RewardModel, SoftmaxPolicy, TwoStagePolicy};
use crate::rng::ChaCha8Rng;
use crate::synthetic_env::SyntheticEnv;
use crate::types::{ActionSet, Context, GradientEstimate, LoggedDataset, SentenceGenerator};

/// Maximum importance weight for every IS- and DR-type method.
pub const DEFAULT_WEIGHT_CLIP: f64 = 200.0;

/// Augmented `(a, s')` draws per logged record in a DSO gradient step.
pub const DEFAULT_AUGMENTATION: usize = 8;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("record {record} has no logged propensity; IS-family estimators need one")]
    MissingPropensity { record: usize },
    #[error("record {record} has non-positive propensity {value}")]
    NonPositivePropensity { record: usize, value: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("density table covers {got} records but the dataset has {expected}")]
    DensityTableMismatch { expected: usize, got: usize },
    #[error("k-means needs 1 <= k <= |A|, got k = {k} for |A| = {actions}")]
    BadClusterCount { k: usize, actions: usize },
}

// ── Value-function handle ───────────────────────────────────────────────

/// `q_hat` as the estimators see it: a fitted reward model, or the
/// environment's closed form for oracle-style tests.
pub enum ValueFn<'a> {
    Model(&'a RewardModel),
    Exact(&'a SyntheticEnv),
}

impl<'a> ValueFn<'a> {
    pub fn evaluator(&self, action_set: &'a ActionSet) -> ValueEval<'a> {
        match self {
            ValueFn::Model(model) => {
                ValueEval::Model(model.evaluator(action_set).expect("model dims checked at fit time"))
            }
            ValueFn::Exact(env) => ValueEval::Exact { env, proj: env.action_sentence_proj(action_set) },
        }
    }
}

/// Prepared per-batch value evaluator.
pub enum ValueEval<'a> {
    Model(crate::nn::PairwiseEval<'a>),
    Exact { env: &'a SyntheticEnv, proj: Array2<f64> },
}

impl ValueEval<'_> {
    pub fn values(&self, x: &Context) -> Array1<f64> {
        match self {
            ValueEval::Model(eval) => eval.scores(&x.features()).expect("dims checked at fit time").0,
            ValueEval::Exact { env, proj } => env.expected_rewards_with_proj(x, proj),
        }
    }
}

// ── Regression-based gradient ───────────────────────────────────────────

/// `(1/n) sum_i E_{a ~ pi}[d log pi(a|x_i) q_hat(x_i, a)]`, the action
/// expectation taken exactly over the full action set.
pub fn grad_regression(
    policy: &SoftmaxPolicy,
    dataset: &LoggedDataset,
    batch: &[usize],
    q_hat: &ValueFn<'_>,
) -> Result<GradientEstimate, GradientError> {
    let eval = policy.evaluator();
    let values_eval = q_hat.evaluator(&policy.action_set);
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    let scale = 1.0 / batch.len().max(1) as f64;
    for &i in batch {
        let record = &dataset.records[i];
        let ctx = record.context.features();
        let (probs, cache) = eval.probs(&ctx);
        let values = values_eval.values(&record.context);
        eval.add_expected_score_grad(&ctx, &cache, &probs, values.view(), scale, &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch.len() })
}

// ── Importance sampling ─────────────────────────────────────────────────

fn propensity_of(dataset: &LoggedDataset, i: usize) -> Result<f64, GradientError> {
    let p = dataset.records[i].propensity.ok_or(GradientError::MissingPropensity { record: i })?;
    if p <= 0.0 {
        return Err(GradientError::NonPositivePropensity { record: i, value: p });
    }
    Ok(p)
}

/// `(1/n) sum_i min(clip, pi(a_i|x_i)/pi_0(a_i|x_i)) d log pi(a_i|x_i) r_i`.
pub fn grad_is(
    policy: &SoftmaxPolicy,
    dataset: &LoggedDataset,
    batch: &[usize],
    clip: f64,
) -> Result<GradientEstimate, GradientError> {
    let eval = policy.evaluator();
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    let scale = 1.0 / batch.len().max(1) as f64;
    for &i in batch {
        let record = &dataset.records[i];
        let propensity = propensity_of(dataset, i)?;
        let ctx = record.context.features();
        let (probs, cache) = eval.probs(&ctx);
        let weight = (probs[record.action] / propensity).min(clip);
        eval.add_score_grad(&ctx, &cache, &probs, record.action, scale * weight * record.reward, &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch.len() })
}

// ── Doubly robust ───────────────────────────────────────────────────────

/// IS on the residual `r - q_hat` plus the exact regression baseline term.
pub fn grad_dr(
    policy: &SoftmaxPolicy,
    dataset: &LoggedDataset,
    batch: &[usize],
    q_hat: &ValueFn<'_>,
    clip: f64,
) -> Result<GradientEstimate, GradientError> {
    let eval = policy.evaluator();
    let values_eval = q_hat.evaluator(&policy.action_set);
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    let scale = 1.0 / batch.len().max(1) as f64;
    for &i in batch {
        let record = &dataset.records[i];
        let propensity = propensity_of(dataset, i)?;
        let ctx = record.context.features();
        let (probs, cache) = eval.probs(&ctx);
        let values = values_eval.values(&record.context);
        let weight = (probs[record.action] / propensity).min(clip);
        let residual = record.reward - values[record.action];
        eval.add_score_grad(&ctx, &cache, &probs, record.action, scale * weight * residual, &mut grads);
        eval.add_expected_score_grad(&ctx, &cache, &probs, values.view(), scale, &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch.len() })
}

// ── Action clustering ───────────────────────────────────────────────────

/// Action clustering for the two-stage decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Action index -> cluster id.
    pub assignments: Vec<usize>,
    /// `k x d_e` cluster centers.
    pub centers: Array2<f64>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.centers.nrows()
    }

    /// Sum of squared distances from each point to its center.
    pub fn inertia(&self, action_set: &ActionSet) -> f64 {
        self.assignments
            .iter()
            .enumerate()
            .map(|(a, &c)| {
                sq_dist(action_set.embeddings.row(a).as_slice().unwrap(), self.centers.row(c).as_slice().unwrap())
            })
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Stops after 100 iterations or
/// when no center moves more than 1e-8; empty clusters are reseeded to the
/// point farthest from its current center.
pub fn cluster_actions(action_set: &ActionSet, k: usize, rng: &mut ChaCha8Rng) -> Result<Clustering, GradientError> {
    Ok(cluster_actions_traced(action_set, k, rng)?.0)
}

/// Like [`cluster_actions`] but also returns the inertia after every
/// assignment pass, which tests use to check Lloyd monotonicity.
pub fn cluster_actions_traced(
    action_set: &ActionSet,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Clustering, Vec<f64>), GradientError> {
    use rand::Rng;
    let n = action_set.len();
    let d = action_set.dim();
    if k == 0 || k > n {
        return Err(GradientError::BadClusterCount { k, actions: n });
    }
    let points = &action_set.embeddings;
    let row = |i: usize| points.row(i);

    // k-means++ seeding.
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&row(first));
    let mut nearest_sq: Vec<f64> = (0..n)
        .map(|i| sq_dist(row(i).as_slice().unwrap(), centers.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in nearest_sq.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&row(pick));
        for i in 0..n {
            let d2 = sq_dist(row(i).as_slice().unwrap(), centers.row(c).as_slice().unwrap());
            if d2 < nearest_sq[i] {
                nearest_sq[i] = d2;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let assign_pass = |centers: &Array2<f64>, assignments: &mut [usize]| -> f64 {
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(row(i).as_slice().unwrap(), centers.row(c).as_slice().unwrap());
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia
    };

    for _iter in 0..100 {
        trace.push(assign_pass(&centers, &mut assignments));

        // Update pass.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let mut s = sums.row_mut(c);
            s += &row(i);
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let mut r = new_centers.row_mut(c);
                r.assign(&sums.row(c));
                r /= counts[c] as f64;
            } else {
                // Reseed the empty cluster to the point farthest from its
                // assigned center.
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a).as_slice().unwrap(), centers.row(assignments[a]).as_slice().unwrap());
                        let db = sq_dist(row(b).as_slice().unwrap(), centers.row(assignments[b]).as_slice().unwrap());
                        da.partial_cmp(&db).expect("finite embeddings")
                    })
                    .expect("non-empty action set");
                new_centers.row_mut(c).assign(&row(farthest));
            }
        }

        let movement = centers
            .rows()
            .into_iter()
            .zip(new_centers.rows())
            .map(|(a, b)| sq_dist(a.as_slice().unwrap(), b.as_slice().unwrap()).sqrt())
            .fold(0.0f64, f64::max);
        centers = new_centers;
        if movement < 1e-8 {
            break;
        }
    }

    // Final assignment against the settled centers.
    assign_pass(&centers, &mut assignments);
    Ok((Clustering { assignments, centers }, trace))
}

// ── POTEC ───────────────────────────────────────────────────────────────

/// Cluster-level DR over the first-stage policy: clipped cluster importance
/// weight on the residual plus the exact composite-policy baseline term.
/// Cluster propensities come from the logging policy's full action
/// probabilities, which is why the logging handle is mandatory.
pub fn grad_potec(
    two_stage: &TwoStagePolicy,
    dataset: &LoggedDataset,
    batch: &[usize],
    q_hat: &ValueFn<'_>,
    logging: &SoftmaxPolicy,
    clip: f64,
) -> Result<GradientEstimate, GradientError> {
    let first = two_stage.first_stage.evaluator();
    let logging_eval = logging.evaluator();
    let values_eval = q_hat.evaluator(&two_stage.action_set);
    let clustering = &two_stage.clustering;
    let k = clustering.num_clusters();
    let mut grads = MlpGrads::zeros_like(&two_stage.first_stage.mlp);
    let scale = 1.0 / batch.len().max(1) as f64;

    for &i in batch {
        let record = &dataset.records[i];
        let ctx = record.context.features();
        let (cluster_probs, cache) = first.probs(&ctx);
        let values = values_eval.values(&record.context);

        // pi_0^1st(c(a_i) | x_i) = sum of member propensities under pi_0.
        let logged_cluster = clustering.assignments[record.action];
        let logging_probs = logging_eval.probs(&ctx).0;
        let cluster_propensity: f64 = clustering
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == logged_cluster)
            .map(|(a, _)| logging_probs[a])
            .sum();
        if cluster_propensity <= 0.0 {
            return Err(GradientError::NonPositivePropensity { record: i, value: cluster_propensity });
        }

        let weight = (cluster_probs[logged_cluster] / cluster_propensity).min(clip);
        let residual = record.reward - values[record.action];
        first.add_score_grad(&ctx, &cache, &cluster_probs, logged_cluster, scale * weight * residual, &mut grads);

        // E_{a ~ pi_theta}[d log pi^1st(c(a)|x) q_hat(x, a)] collapses to the
        // per-cluster greedy representatives under the composite policy.
        let mut best: Vec<Option<usize>> = vec![None; k];
        for (a, &c) in clustering.assignments.iter().enumerate() {
            match best[c] {
                None => best[c] = Some(a),
                Some(cur) if values[a] > values[cur] => best[c] = Some(a),
                _ => {}
            }
        }
        let mut greedy_values = Array1::zeros(k);
        for (c, b) in best.iter().enumerate() {
            greedy_values[c] = values[b.expect("every cluster nonempty")];
        }
        first.add_expected_score_grad(&ctx, &cache, &cluster_probs, greedy_values.view(), scale, &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch.len() })
}

// ── DSO ─────────────────────────────────────────────────────────────────

/// Configuration of the DSO estimator for one training run.
pub struct DsoConfig<'a> {
    pub kernel: KernelConfig,
    /// Marginal density `pi_0(phi(s_i) | x_i)` per record, aligned with the
    /// dataset; precomputed once because it does not depend on the policy.
    pub densities: &'a [f64],
    /// Augmented draws per record and step.
    pub m_aug: usize,
    pub generator: &'a dyn SentenceGenerator,
    pub clip: f64,
}

/// Soft rejection sampling in the marginalized sentence space: per record,
/// draw `(a_j ~ pi_theta, s'_j ~ generator)` pairs and weight each score by
/// `min(clip, K(s_i, s'_j) / pi_0_hat(phi(s_i)|x_i))`, times the logged
/// reward.
pub fn grad_dso(
    policy: &SoftmaxPolicy,
    dataset: &LoggedDataset,
    batch: &[usize],
    cfg: &DsoConfig<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate, GradientError> {
    if cfg.densities.len() != dataset.records.len() {
        return Err(GradientError::DensityTableMismatch { expected: dataset.records.len(), got: cfg.densities.len() });
    }
    let eval = policy.evaluator();
    let action_set = &policy.action_set;
    let beta = eval.beta();
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    let scale = 1.0 / batch.len().max(1) as f64;

    for &i in batch {
        let record = &dataset.records[i];
        let ctx = record.context.features();
        let (probs, cache) = eval.probs(&ctx);
        let density = cfg.densities[i];

        let mut action_weights = Array1::<f64>::zeros(action_set.len());
        let mut total_weight = 0.0;
        for _ in 0..cfg.m_aug.max(1) {
            let a = crate::policies::sample_index(&probs, rng);
            let augmented =
                cfg.generator.generate(&record.context.query, action_set.embedding(a).as_slice().unwrap(), rng);
            let k_val = kernel_eval(&cfg.kernel, &record.sentence, &augmented)?;
            let weight = (k_val / density).min(cfg.clip);
            action_weights[a] += weight;
            total_weight += weight;
        }

        // Logit coefficients of sum_j w_j * d log pi(a_j | x) * r_i / M.
        let factor = beta * record.reward * scale / cfg.m_aug.max(1) as f64;
        let mut coeffs = probs.mapv(|p| -factor * total_weight * p);
        coeffs.scaled_add(factor, &action_weights);
        eval.accumulate_logit_weighted(&ctx, &cache, coeffs.view(), &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch.len() })
}

// ── Online REINFORCE ────────────────────────────────────────────────────

/// Fresh interaction each call: `x, a ~ pi_theta, s, r`, REINFORCE average.
pub fn grad_online(
    policy: &SoftmaxPolicy,
    env: &SyntheticEnv,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate, GradientError> {
    let eval = policy.evaluator();
    let action_set = &policy.action_set;
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    let scale = 1.0 / batch_size.max(1) as f64;
    for _ in 0..batch_size {
        let x = env.sample_context(rng);
        let ctx = x.features();
        let (probs, cache) = eval.probs(&ctx);
        let a = crate::policies::sample_index(&probs, rng);
        let sentence = env.generate_sentence(&x.query, action_set.embedding(a).as_slice().unwrap(), rng, false);
        let reward = env.simulate_reward(&x, &sentence, rng, false);
        eval.add_score_grad(&ctx, &cache, &probs, a, scale * reward, &mut grads);
    }
    Ok(GradientEstimate { values: grads, sample_count: batch_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpParams;
    use crate::policies::score_function;
    use crate::rng;
    use crate::synthetic_env::EnvConfig;
    use crate::types::Sentence;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1 as A1;

    fn setup(seed: u64, n_actions: usize) -> (SyntheticEnv, LoggedDataset, SoftmaxPolicy) {
        let env = SyntheticEnv::new(EnvConfig::default(), seed);
        let actions = env.sample_action_set(n_actions, &mut rng::stream(seed, "actions"));
        let logging = SoftmaxPolicy::init(10, actions.clone(), 1.0, 16, &mut rng::stream(seed, "logging"));
        let dataset = env.collect_logged_data(&logging, 24, 0, seed);
        let policy = SoftmaxPolicy::init(10, actions, 1.0, 16, &mut rng::stream(seed, "policy"));
        (env, dataset, policy)
    }

    /// Reward model that predicts a constant everywhere.
    fn constant_model(ctx_dim: usize, emb_dim: usize, c: f64) -> RewardModel {
        let mut mlp = MlpParams::init(ctx_dim + emb_dim, 4, 1, &mut rng::seeded(0));
        mlp.w1.fill(0.0);
        mlp.b1.fill(0.0);
        mlp.w2.fill(0.0);
        mlp.b2[0] = c;
        RewardModel { mlp, ctx_dim }
    }

    #[test]
    fn constant_q_hat_gives_zero_regression_gradient() {
        let (_, dataset, policy) = setup(1, 6);
        let q = constant_model(10, 5, 3.25);
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let g = grad_regression(&policy, &dataset, &batch, &ValueFn::Model(&q)).unwrap();
        assert!(g.norm() < 1e-10, "norm {}", g.norm());
    }

    #[test]
    fn single_action_gives_zero_gradient_for_every_method() {
        let (env, dataset, policy) = setup(2, 1);
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let q = constant_model(10, 5, 0.5);
        let value = ValueFn::Model(&q);

        assert_eq!(grad_regression(&policy, &dataset, &batch, &value).unwrap().norm(), 0.0);
        assert_eq!(grad_is(&policy, &dataset, &batch, DEFAULT_WEIGHT_CLIP).unwrap().norm(), 0.0);
        assert_eq!(grad_dr(&policy, &dataset, &batch, &value, DEFAULT_WEIGHT_CLIP).unwrap().norm(), 0.0);
        assert_eq!(grad_online(&policy, &env, 8, &mut rng::seeded(3)).unwrap().norm(), 0.0);

        let densities = vec![0.5; dataset.len()];
        let cfg = DsoConfig {
            kernel: KernelConfig::new(crate::kernels::KernelFamily::Gaussian, 1.0),
            densities: &densities,
            m_aug: 4,
            generator: &env,
            clip: DEFAULT_WEIGHT_CLIP,
        };
        assert_eq!(grad_dso(&policy, &dataset, &batch, &cfg, &mut rng::seeded(4)).unwrap().norm(), 0.0);

        let clustering = Clustering { assignments: vec![0], centers: policy.action_set.embeddings.clone() };
        let first = SoftmaxPolicy::init(10, ActionSet::new(clustering.centers.clone()), 1.0, 8, &mut rng::seeded(5));
        let two_stage = TwoStagePolicy::new(first, clustering, q.clone(), policy.action_set.clone());
        let logging = policy.clone();
        let g = grad_potec(&two_stage, &dataset, &batch, &ValueFn::Model(&q), &logging, DEFAULT_WEIGHT_CLIP).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn on_policy_is_equals_reinforce_average() {
        let env = SyntheticEnv::new(EnvConfig::default(), 6);
        let actions = env.sample_action_set(5, &mut rng::stream(6, "actions"));
        let logging = SoftmaxPolicy::init(10, actions, 1.0, 16, &mut rng::stream(6, "logging"));
        let dataset = env.collect_logged_data(&logging, 24, 0, 6);
        // Evaluate IS with the logging policy itself: weights are all one.
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let is = grad_is(&logging, &dataset, &batch, DEFAULT_WEIGHT_CLIP).unwrap();

        let mut reinforce = MlpGrads::zeros_like(&logging.mlp);
        for record in &dataset.records {
            let s = score_function(&logging, &record.context, record.action);
            reinforce.scaled_add(record.reward / dataset.len() as f64, &s.values);
        }
        let diff: f64 = is
            .values
            .to_flat()
            .iter()
            .zip(reinforce.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "max deviation {diff}");
    }

    #[test]
    fn dr_with_zero_q_hat_equals_is() {
        let (_, dataset, policy) = setup(7, 5);
        let q = constant_model(10, 5, 0.0);
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let is = grad_is(&policy, &dataset, &batch, DEFAULT_WEIGHT_CLIP).unwrap();
        let dr = grad_dr(&policy, &dataset, &batch, &ValueFn::Model(&q), DEFAULT_WEIGHT_CLIP).unwrap();
        let diff: f64 = is
            .values
            .to_flat()
            .iter()
            .zip(dr.values.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max deviation {diff}");
    }

    #[test]
    fn missing_propensity_is_an_error() {
        let (_, mut dataset, policy) = setup(8, 4);
        dataset.records[3].propensity = None;
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let err = grad_is(&policy, &dataset, &batch, DEFAULT_WEIGHT_CLIP).unwrap_err();
        assert!(err.to_string().contains("record 3"), "{err}");
    }

    #[test]
    fn dso_uniform_kernel_rejects_far_sentences() {
        let (env, mut dataset, policy) = setup(9, 5);
        // A logged sentence no generator draw can land near: hard rejection.
        dataset.records[0].sentence = Sentence::new(vec![1e6; 5]);
        let densities = vec![0.5; dataset.len()];
        let cfg = DsoConfig {
            kernel: KernelConfig::new(crate::kernels::KernelFamily::Uniform, 1.0),
            densities: &densities,
            m_aug: 16,
            generator: &env,
            clip: DEFAULT_WEIGHT_CLIP,
        };
        let g = grad_dso(&policy, &dataset, &[0], &cfg, &mut rng::seeded(10)).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn dso_is_deterministic_per_seed() {
        let (env, dataset, policy) = setup(11, 5);
        let densities = vec![0.1; dataset.len()];
        let cfg = DsoConfig {
            kernel: KernelConfig::new(crate::kernels::KernelFamily::Gaussian, 1.0),
            densities: &densities,
            m_aug: 8,
            generator: &env,
            clip: DEFAULT_WEIGHT_CLIP,
        };
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let g1 = grad_dso(&policy, &dataset, &batch, &cfg, &mut rng::seeded(12)).unwrap();
        let g2 = grad_dso(&policy, &dataset, &batch, &cfg, &mut rng::seeded(12)).unwrap();
        assert_eq!(g1.values.to_flat(), g2.values.to_flat());
    }

    #[test]
    fn online_gradient_is_zero_in_a_rewardless_env() {
        let config = EnvConfig { scale: 0.0, sentence_noise: 0.0, reward_noise: 0.0, ..EnvConfig::default() };
        let env = SyntheticEnv::new(config, 13);
        let actions = env.sample_action_set(4, &mut rng::stream(13, "a"));
        let policy = SoftmaxPolicy::init(10, actions, 1.0, 8, &mut rng::stream(13, "p"));
        let g = grad_online(&policy, &env, 32, &mut rng::seeded(14)).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn potec_single_cluster_gradient_is_zero() {
        let (_, dataset, policy) = setup(15, 6);
        let clustering = Clustering {
            assignments: vec![0; 6],
            centers: policy.action_set.embeddings.slice(ndarray::s![..1, ..]).to_owned(),
        };
        let q = constant_model(10, 5, 1.0);
        let first = SoftmaxPolicy::init(10, ActionSet::new(clustering.centers.clone()), 1.0, 8, &mut rng::seeded(16));
        let two_stage = TwoStagePolicy::new(first, clustering, q.clone(), policy.action_set.clone());
        let batch: Vec<usize> = (0..dataset.len()).collect();
        let g = grad_potec(&two_stage, &dataset, &batch, &ValueFn::Model(&q), &policy, DEFAULT_WEIGHT_CLIP).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn kmeans_distinct_points_reach_zero_inertia_when_k_equals_n() {
        let env = SyntheticEnv::new(EnvConfig::default(), 17);
        let actions = env.sample_action_set(6, &mut rng::stream(17, "a"));
        let clustering = cluster_actions(&actions, 6, &mut rng::seeded(18)).unwrap();
        assert_abs_diff_eq!(clustering.inertia(&actions), 0.0, epsilon = 1e-20);
        // One action per cluster.
        let mut counts = vec![0; 6];
        for &c in &clustering.assignments {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn kmeans_duplicated_points_have_zero_inertia() {
        let row = A1::from_vec(vec![0.5, -1.0, 2.0]);
        let mut embeddings = Array2::zeros((8, 3));
        for mut r in embeddings.rows_mut() {
            r.assign(&row);
        }
        let actions = ActionSet::new(embeddings);
        let clustering = cluster_actions(&actions, 3, &mut rng::seeded(19)).unwrap();
        assert_abs_diff_eq!(clustering.inertia(&actions), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let env = SyntheticEnv::new(EnvConfig::default(), 20);
        for seed in 0..5 {
            let actions = env.sample_action_set(40, &mut rng::stream(seed, "a"));
            let (_, trace) = cluster_actions_traced(&actions, 7, &mut rng::stream(seed, "k")).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "inertia increased: {:?}", w);
            }
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let env = SyntheticEnv::new(EnvConfig::default(), 21);
        let actions = env.sample_action_set(3, &mut rng::stream(21, "a"));
        assert!(cluster_actions(&actions, 0, &mut rng::seeded(22)).is_err());
        assert!(cluster_actions(&actions, 4, &mut rng::seeded(22)).is_err());
    }

    #[test]
    fn every_action_lands_in_a_nonempty_cluster() {
        let env = SyntheticEnv::new(EnvConfig::default(), 23);
        let actions = env.sample_action_set(50, &mut rng::stream(23, "a"));
        let clustering = cluster_actions(&actions, 10, &mut rng::seeded(24)).unwrap();
        assert_eq!(clustering.assignments.len(), 50);
        let mut counts = vec![0usize; 10];
        for &c in &clustering.assignments {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "empty cluster in {counts:?}");
    }
}
