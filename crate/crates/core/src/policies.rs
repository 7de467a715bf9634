//! Stochastic prompt policies over a finite action set.
//!
//! [`SoftmaxPolicy`] is the workhorse: an MLP maps `concat(x, e_a)` to a
//! scalar logit per action and the policy is `softmax(beta * logits)`. The
//! uniform and epsilon-greedy baselines and the two-stage (cluster, then
//! greedy) decomposition share the [`ActionPolicy`] trait so evaluation and
//! data collection treat them interchangeably.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradients::Clustering;
use crate::nn::{self, MlpGrads, MlpParams, NnError, PairCache, PairwiseEval};
use crate::rng::ChaCha8Rng;
use crate::types::{ActionSet, Context, GradientEstimate};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("policy input dim {mlp_in} incompatible with context dim {ctx} + embedding dim {emb}")]
    DimMismatch { mlp_in: usize, ctx: usize, emb: usize },
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("checkpoint malformed: {0}")]
    Checkpoint(String),
}

// ── Softmax policy ──────────────────────────────────────────────────────

/// Softmax-of-logits policy with inverse temperature `beta`.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    pub mlp: MlpParams,
    pub action_set: ActionSet,
    pub beta: f64,
}

impl SoftmaxPolicy {
    pub fn new(mlp: MlpParams, action_set: ActionSet, beta: f64) -> Result<Self, PolicyError> {
        if mlp.in_dim() <= action_set.dim() || mlp.out_dim() != 1 {
            return Err(PolicyError::DimMismatch {
                mlp_in: mlp.in_dim(),
                ctx: mlp.in_dim().saturating_sub(action_set.dim()),
                emb: action_set.dim(),
            });
        }
        Ok(Self { mlp, action_set, beta })
    }

    /// Freshly initialized policy for `ctx_dim`-dimensional contexts.
    pub fn init(ctx_dim: usize, action_set: ActionSet, beta: f64, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mlp = MlpParams::init(ctx_dim + action_set.dim(), hidden, 1, rng);
        Self { mlp, action_set, beta }
    }

    /// Context feature dimension the logit network expects.
    pub fn ctx_dim(&self) -> usize {
        self.mlp.in_dim() - self.action_set.dim()
    }

    /// Prepares the all-action fast path; build once per batch of contexts.
    pub fn evaluator(&self) -> PolicyEval<'_> {
        let eval = PairwiseEval::new(&self.mlp, self.action_set.embeddings.view(), self.ctx_dim())
            .expect("policy invariants guarantee consistent shapes");
        PolicyEval { eval, beta: self.beta }
    }
}

/// All-action evaluation of one [`SoftmaxPolicy`] with cached projections.
pub struct PolicyEval<'a> {
    eval: PairwiseEval<'a>,
    beta: f64,
}

impl PolicyEval<'_> {
    pub fn num_actions(&self) -> usize {
        self.eval.num_actions()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Action probabilities for one context, plus the activation cache the
    /// gradient accumulators need.
    pub fn probs(&self, ctx: &[f64]) -> (Array1<f64>, PairCache) {
        let (scores, cache) = self.eval.scores(ctx).expect("ctx dim checked by caller");
        let scaled: Vec<f64> = scores.iter().map(|l| self.beta * l).collect();
        (Array1::from_vec(nn::softmax(&scaled)), cache)
    }

    /// Adds `sum_a coeffs[a] * d logit(ctx, a) / d params` into `grads`.
    pub fn accumulate_logit_weighted(
        &self,
        ctx: &[f64],
        cache: &PairCache,
        coeffs: ArrayView1<'_, f64>,
        grads: &mut MlpGrads,
    ) {
        self.eval
            .accumulate_weighted_grad(ctx, cache, coeffs, grads)
            .expect("shapes fixed by construction");
    }

    /// Adds `scale * d log pi(action | ctx) / d params` into `grads`.
    ///
    /// `d log pi(a|x) = beta * (d logit(x,a) - sum_a' pi(a'|x) d logit(x,a'))`.
    pub fn add_score_grad(
        &self,
        ctx: &[f64],
        cache: &PairCache,
        probs: &Array1<f64>,
        action: usize,
        scale: f64,
        grads: &mut MlpGrads,
    ) {
        let mut coeffs = probs.mapv(|p| -scale * self.beta * p);
        coeffs[action] += scale * self.beta;
        self.accumulate_logit_weighted(ctx, cache, coeffs.view(), grads);
    }

    /// Adds the exact action expectation
    /// `scale * sum_a pi(a|x) * values[a] * d log pi(a|x) / d params` into
    /// `grads`.
    pub fn add_expected_score_grad(
        &self,
        ctx: &[f64],
        cache: &PairCache,
        probs: &Array1<f64>,
        values: ArrayView1<'_, f64>,
        scale: f64,
        grads: &mut MlpGrads,
    ) {
        // c = beta * (pi .* v - (pi . v) * pi), one weighted backward pass.
        let mean_value: f64 = probs.iter().zip(values.iter()).map(|(p, v)| p * v).sum();
        let mut coeffs = Array1::zeros(probs.len());
        for (c, (p, v)) in coeffs.iter_mut().zip(probs.iter().zip(values.iter())) {
            *c = scale * self.beta * p * (v - mean_value);
        }
        self.accumulate_logit_weighted(ctx, cache, coeffs.view(), grads);
    }
}

/// Exact `d log pi(a | x) / d params` of a softmax policy.
pub fn score_function(policy: &SoftmaxPolicy, x: &Context, action: usize) -> GradientEstimate {
    let eval = policy.evaluator();
    let ctx = x.features();
    let (probs, cache) = eval.probs(&ctx);
    let mut grads = MlpGrads::zeros_like(&policy.mlp);
    eval.add_score_grad(&ctx, &cache, &probs, action, 1.0, &mut grads);
    GradientEstimate { values: grads, sample_count: 1 }
}

// ── Reward model ────────────────────────────────────────────────────────

/// MLP reward predictor `q_hat(x, e_a)`, shared by the epsilon-greedy
/// baseline, the two-stage policy's second stage, and the DR-family
/// estimators.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub mlp: MlpParams,
    pub ctx_dim: usize,
}

impl RewardModel {
    pub fn init(ctx_dim: usize, emb_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: MlpParams::init(ctx_dim + emb_dim, hidden, 1, rng), ctx_dim }
    }

    /// All-action fast path over a fixed action set.
    pub fn evaluator<'a>(&'a self, action_set: &'a ActionSet) -> Result<PairwiseEval<'a>, NnError> {
        PairwiseEval::new(&self.mlp, action_set.embeddings.view(), self.ctx_dim)
    }

    /// Predicted rewards of every action for one context.
    pub fn predict_all(&self, x: &Context, action_set: &ActionSet) -> Array1<f64> {
        let eval = self.evaluator(action_set).expect("model/action dims checked at fit time");
        eval.scores(&x.features()).expect("ctx dim checked at fit time").0
    }
}

// ── Baseline and two-stage policies ─────────────────────────────────────

/// Non-learned baseline policies.
#[derive(Debug, Clone)]
pub enum SimplePolicy {
    Uniform { action_set: ActionSet },
    EpsilonGreedy { epsilon: f64, value: RewardModel, action_set: ActionSet },
}

impl SimplePolicy {
    pub fn uniform(action_set: ActionSet) -> Self {
        SimplePolicy::Uniform { action_set }
    }

    pub fn epsilon_greedy(epsilon: f64, value: RewardModel, action_set: ActionSet) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(PolicyError::InvalidEpsilon(epsilon));
        }
        Ok(SimplePolicy::EpsilonGreedy { epsilon, value, action_set })
    }
}

/// Two-stage decomposition: a softmax policy picks a cluster, then a frozen
/// greedy argmax of `q_hat` picks the action within the cluster.
#[derive(Debug, Clone)]
pub struct TwoStagePolicy {
    /// Softmax over cluster centers; its action set has `k` rows of `e_c`.
    pub first_stage: SoftmaxPolicy,
    pub clustering: Clustering,
    pub q_hat: RewardModel,
    pub action_set: ActionSet,
}

impl TwoStagePolicy {
    pub fn new(
        first_stage: SoftmaxPolicy,
        clustering: Clustering,
        q_hat: RewardModel,
        action_set: ActionSet,
    ) -> Self {
        debug_assert_eq!(first_stage.action_set.len(), clustering.num_clusters());
        debug_assert_eq!(clustering.assignments.len(), action_set.len());
        Self { first_stage, clustering, q_hat, action_set }
    }

    /// Greedy representative of each cluster for this context; ties break to
    /// the lowest action index.
    pub fn greedy_actions(&self, x: &Context) -> Vec<usize> {
        let values = self.q_hat.predict_all(x, &self.action_set);
        let k = self.clustering.num_clusters();
        let mut best: Vec<Option<usize>> = vec![None; k];
        for (a, &c) in self.clustering.assignments.iter().enumerate() {
            match best[c] {
                None => best[c] = Some(a),
                Some(cur) if values[a] > values[cur] => best[c] = Some(a),
                _ => {}
            }
        }
        best.into_iter()
            .map(|b| b.expect("clustering invariant: every cluster nonempty"))
            .collect()
    }
}

// ── Uniform policy surface ──────────────────────────────────────────────

/// Common surface over every policy kind: probabilities and sampling.
pub trait ActionPolicy {
    fn action_set(&self) -> &ActionSet;

    fn num_actions(&self) -> usize {
        self.action_set().len()
    }

    /// One-off probability query. Loops over many contexts should go
    /// through [`ActionPolicy::prepare`] instead.
    fn action_probs(&self, x: &Context) -> Array1<f64> {
        self.prepare().probs(x)
    }

    /// Builds whatever cached state makes repeated queries cheap.
    fn prepare(&self) -> PreparedPolicy<'_>;

    /// Inverse-CDF sample from `action_probs`; deterministic given the rng
    /// state.
    fn sample_action(&self, x: &Context, rng: &mut ChaCha8Rng) -> usize {
        sample_index(&self.action_probs(x), rng)
    }
}

/// Cached per-policy state for repeated probability queries.
pub enum PreparedPolicy<'a> {
    Softmax(PolicyEval<'a>),
    Uniform { n: usize },
    EpsilonGreedy { epsilon: f64, values: PairwiseEval<'a> },
    TwoStage { policy: &'a TwoStagePolicy, first: PolicyEval<'a> },
}

impl PreparedPolicy<'_> {
    pub fn probs(&self, x: &Context) -> Array1<f64> {
        match self {
            PreparedPolicy::Softmax(eval) => eval.probs(&x.features()).0,
            PreparedPolicy::Uniform { n } => Array1::from_elem(*n, 1.0 / *n as f64),
            PreparedPolicy::EpsilonGreedy { epsilon, values } => {
                let (scores, _) = values.scores(&x.features()).expect("dims checked at construction");
                let n = scores.len();
                let best = argmax_lowest(&scores);
                let mut probs = Array1::from_elem(n, epsilon / n as f64);
                probs[best] += 1.0 - epsilon;
                probs
            }
            PreparedPolicy::TwoStage { policy, first } => {
                let cluster_probs = first.probs(&x.features()).0;
                let greedy = policy.greedy_actions(x);
                let mut probs = Array1::zeros(policy.action_set.len());
                for (c, &a) in greedy.iter().enumerate() {
                    probs[a] += cluster_probs[c];
                }
                probs
            }
        }
    }

    pub fn sample(&self, x: &Context, rng: &mut ChaCha8Rng) -> usize {
        sample_index(&self.probs(x), rng)
    }
}

impl ActionPolicy for SoftmaxPolicy {
    fn action_set(&self) -> &ActionSet {
        &self.action_set
    }

    fn prepare(&self) -> PreparedPolicy<'_> {
        PreparedPolicy::Softmax(self.evaluator())
    }
}

impl ActionPolicy for SimplePolicy {
    fn action_set(&self) -> &ActionSet {
        match self {
            SimplePolicy::Uniform { action_set } => action_set,
            SimplePolicy::EpsilonGreedy { action_set, .. } => action_set,
        }
    }

    fn prepare(&self) -> PreparedPolicy<'_> {
        match self {
            SimplePolicy::Uniform { action_set } => PreparedPolicy::Uniform { n: action_set.len() },
            SimplePolicy::EpsilonGreedy { epsilon, value, action_set } => PreparedPolicy::EpsilonGreedy {
                epsilon: *epsilon,
                values: value.evaluator(action_set).expect("dims checked at construction"),
            },
        }
    }
}

impl ActionPolicy for TwoStagePolicy {
    fn action_set(&self) -> &ActionSet {
        &self.action_set
    }

    fn prepare(&self) -> PreparedPolicy<'_> {
        PreparedPolicy::TwoStage { policy: self, first: self.first_stage.evaluator() }
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Lowest index attaining the maximum.
pub fn argmax_lowest(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// Shape-tagged flat array, the unit of every JSON checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct ArrayJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayJson {
    pub fn from_matrix(m: &ndarray::Array2<f64>) -> Self {
        Self { shape: vec![m.nrows(), m.ncols()], data: m.iter().copied().collect() }
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        Self { shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn to_matrix(&self) -> Result<ndarray::Array2<f64>, PolicyError> {
        if self.shape.len() != 2 {
            return Err(PolicyError::Checkpoint(format!("expected matrix shape, got {:?}", self.shape)));
        }
        ndarray::Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>, PolicyError> {
        if self.shape.len() != 1 || self.shape[0] != self.data.len() {
            return Err(PolicyError::Checkpoint(format!("expected vector shape, got {:?}", self.shape)));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MlpJson {
    pub w1: ArrayJson,
    pub b1: ArrayJson,
    pub w2: ArrayJson,
    pub b2: ArrayJson,
}

impl MlpJson {
    pub fn from_params(p: &MlpParams) -> Self {
        Self {
            w1: ArrayJson::from_matrix(&p.w1),
            b1: ArrayJson::from_vector(&p.b1),
            w2: ArrayJson::from_matrix(&p.w2),
            b2: ArrayJson::from_vector(&p.b2),
        }
    }

    pub fn to_params(&self) -> Result<MlpParams, PolicyError> {
        Ok(MlpParams {
            w1: self.w1.to_matrix()?,
            b1: self.b1.to_vector()?,
            w2: self.w2.to_matrix()?,
            b2: self.b2.to_vector()?,
        })
    }
}

/// Serialized policy, written and read by the CLI's save/load commands.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyCheckpoint {
    Softmax {
        beta: f64,
        mlp: MlpJson,
        action_embeddings: ArrayJson,
    },
    Uniform {
        action_embeddings: ArrayJson,
    },
    TwoStage {
        beta: f64,
        first_stage_mlp: MlpJson,
        cluster_centers: ArrayJson,
        assignments: Vec<usize>,
        q_hat: MlpJson,
        q_hat_ctx_dim: usize,
        action_embeddings: ArrayJson,
    },
}

impl SoftmaxPolicy {
    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint::Softmax {
            beta: self.beta,
            mlp: MlpJson::from_params(&self.mlp),
            action_embeddings: ArrayJson::from_matrix(&self.action_set.embeddings),
        }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self, PolicyError> {
        match ckpt {
            PolicyCheckpoint::Softmax { beta, mlp, action_embeddings } => {
                SoftmaxPolicy::new(mlp.to_params()?, ActionSet::new(action_embeddings.to_matrix()?), *beta)
            }
            other => Err(PolicyError::Checkpoint(format!("expected softmax checkpoint, got {other:?}"))),
        }
    }
}

impl TwoStagePolicy {
    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint::TwoStage {
            beta: self.first_stage.beta,
            first_stage_mlp: MlpJson::from_params(&self.first_stage.mlp),
            cluster_centers: ArrayJson::from_matrix(&self.clustering.centers),
            assignments: self.clustering.assignments.clone(),
            q_hat: MlpJson::from_params(&self.q_hat.mlp),
            q_hat_ctx_dim: self.q_hat.ctx_dim,
            action_embeddings: ArrayJson::from_matrix(&self.action_set.embeddings),
        }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self, PolicyError> {
        match ckpt {
            PolicyCheckpoint::TwoStage {
                beta,
                first_stage_mlp,
                cluster_centers,
                assignments,
                q_hat,
                q_hat_ctx_dim,
                action_embeddings,
            } => {
                let centers = cluster_centers.to_matrix()?;
                let first_stage = SoftmaxPolicy::new(first_stage_mlp.to_params()?, ActionSet::new(centers.clone()), *beta)?;
                Ok(TwoStagePolicy::new(
                    first_stage,
                    Clustering { assignments: assignments.clone(), centers },
                    RewardModel { mlp: q_hat.to_params()?, ctx_dim: *q_hat_ctx_dim },
                    ActionSet::new(action_embeddings.to_matrix()?),
                ))
            }
            other => Err(PolicyError::Checkpoint(format!("expected two_stage checkpoint, got {other:?}"))),
        }
    }
}
