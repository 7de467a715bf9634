//! The synthetic data-generating process: context and action sampling, the
//! sine-warped sentence generator, a reward simulator linear in the sentence,
//! logging-policy construction, and logged-data collection.
//!
//! The sine warp makes distinct action embeddings land on similar sentences
//! while keeping the action-to-sentence map smooth; the reward being linear
//! in the sentence gives a closed-form `E[r | x, a]`, which is what makes
//! ground-truth evaluation exact.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::learner::{self, FitHyper, LearnerError};
use crate::policies::{ActionPolicy, SimplePolicy, SoftmaxPolicy};
use crate::rng::{self, ChaCha8Rng};
use crate::types::{ActionSet, Context, DatasetMeta, Dims, LoggedDataset, LoggedRecord, RewardType, Sentence, SentenceGenerator};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("logging base-model fit failed: {0}")]
    BaseModelFit(#[from] LearnerError),
}

/// Dimensions and noise scales of the data-generating process.
#[derive(Debug, Clone, Copy)]
pub struct EnvConfig {
    pub dims: Dims,
    /// Sentence scaling factor `c`.
    pub scale: f64,
    /// Sentence noise `sigma_s`.
    pub sentence_noise: f64,
    /// Reward noise `sigma_r`.
    pub reward_noise: f64,
    /// Kernel-distance corruption `delta_s`, stored per sentence as the
    /// noisy embedding. Rewards always use the clean embedding.
    pub embedding_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dims: Dims { d_u: 5, d_q: 5, d_e: 5, d_s: 5 },
            scale: 5.0,
            sentence_noise: 1.0,
            reward_noise: 1.0,
            embedding_noise: 1.0,
        }
    }
}

/// Logging-policy recipe: uniform-random pretraining data for the base
/// reward model, then a softmax over its predictions.
#[derive(Debug, Clone, Copy)]
pub struct LoggingPolicySpec {
    /// Uniform-random interactions collected to fit the base model.
    pub pretrain_size: usize,
    /// Inverse temperature `beta_0` of the resulting softmax policy.
    pub beta: f64,
    pub fit: FitHyper,
}

impl Default for LoggingPolicySpec {
    fn default() -> Self {
        Self { pretrain_size: 10_000, beta: 1.0, fit: FitHyper::default() }
    }
}

/// The only source of ground-truth rewards. Coefficient matrices are drawn
/// once per seed from Uniform(-1, 1) and frozen.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    pub config: EnvConfig,
    pub seed: u64,
    /// Query map of the sentence generator, `d_q x d_s`.
    m_q_sentence: Array2<f64>,
    /// Action-embedding map of the sentence generator, `d_e x d_s`.
    m_e: Array2<f64>,
    /// User map of the reward simulator, `d_u x d_s`.
    m_u: Array2<f64>,
    /// Query map of the reward simulator, `d_q x d_s`; drawn independently
    /// of the sentence-side query map.
    m_q_reward: Array2<f64>,
    /// Mixing matrix of the reward simulator, `d_s x d_s`.
    m_s: Array2<f64>,
}

impl SyntheticEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "env-coefficients");
        let d = config.dims;
        let mut uniform = |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0));
        let m_q_sentence = uniform(d.d_q, d.d_s);
        let m_e = uniform(d.d_e, d.d_s);
        let m_u = uniform(d.d_u, d.d_s);
        let m_q_reward = uniform(d.d_q, d.d_s);
        let m_s = uniform(d.d_s, d.d_s);
        Self { config, seed, m_q_sentence, m_e, m_u, m_q_reward, m_s }
    }

    pub fn dims(&self) -> Dims {
        self.config.dims
    }

    /// `|A| x d_e` action embeddings, entries i.i.d. standard normal.
    pub fn sample_action_set(&self, count: usize, rng: &mut ChaCha8Rng) -> ActionSet {
        assert!(count >= 1, "action set needs at least one action");
        ActionSet::new(Array2::from_shape_fn((count, self.config.dims.d_e), |_| rng.sample(StandardNormal)))
    }

    /// User and query vectors, entries i.i.d. standard normal.
    pub fn sample_context(&self, rng: &mut ChaCha8Rng) -> Context {
        let d = self.config.dims;
        Context::new(
            (0..d.d_u).map(|_| rng.sample(StandardNormal)).collect(),
            (0..d.d_q).map(|_| rng.sample(StandardNormal)).collect(),
        )
    }

    /// Noise-free sentence mean `f_s(q, e_a) = c * sine(q M_q + e_a M_e)`;
    /// every coordinate lies in `[-c, c]`.
    pub fn sentence_mean(&self, query: &[f64], action_embedding: &[f64]) -> Array1<f64> {
        let q = ArrayView1::from(query);
        let e = ArrayView1::from(action_embedding);
        let mut z = q.dot(&self.m_q_sentence);
        z += &e.dot(&self.m_e);
        z.mapv_inplace(|v| self.config.scale * v.sin());
        z
    }

    /// Draws `s ~ N(f_s(q, e_a), sigma_s^2)` and attaches the
    /// `delta_s`-perturbed copy used for kernel distances. `noiseless`
    /// returns the mean itself with no perturbed copy and consumes no
    /// randomness.
    pub fn generate_sentence(
        &self,
        query: &[f64],
        action_embedding: &[f64],
        rng: &mut ChaCha8Rng,
        noiseless: bool,
    ) -> Sentence {
        let mean = self.sentence_mean(query, action_embedding);
        if noiseless {
            return Sentence::new(mean.to_vec());
        }
        let sigma = self.config.sentence_noise;
        let embedding: Vec<f64> = mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let delta = self.config.embedding_noise;
        let noisy: Vec<f64> = embedding.iter().map(|v| v + delta * rng.sample::<f64, _>(StandardNormal)).collect();
        Sentence::with_noisy(embedding, noisy)
    }

    /// Context-dependent weights `w(x) = (u M_u + q M_qr) M_s`, so that the
    /// reward mean is `w(x) . s`.
    pub fn reward_weights(&self, x: &Context) -> Array1<f64> {
        let u = ArrayView1::from(&x.user[..]);
        let q = ArrayView1::from(&x.query[..]);
        let mut v = u.dot(&self.m_u);
        v += &q.dot(&self.m_q_reward);
        v.dot(&self.m_s)
    }

    /// Noise-free reward mean `f_r(x, s)`, linear in the sentence embedding.
    pub fn reward_mean(&self, x: &Context, sentence_embedding: &[f64]) -> f64 {
        self.reward_weights(x).dot(&ArrayView1::from(sentence_embedding))
    }

    /// Draws `r ~ N(f_r(x, s), sigma_r^2)`. Always uses the clean sentence
    /// embedding; the perturbed copy only ever affects kernel distances.
    pub fn simulate_reward(&self, x: &Context, sentence: &Sentence, rng: &mut ChaCha8Rng, noiseless: bool) -> f64 {
        let mean = self.reward_mean(x, &sentence.embedding);
        if noiseless {
            mean
        } else {
            mean + self.config.reward_noise * rng.sample::<f64, _>(StandardNormal)
        }
    }

    /// Closed-form `E[r | x, a] = f_r(x, f_s(q, e_a))`, exact because the
    /// reward mean is linear in the sentence and `E[s] = f_s`.
    pub fn expected_reward(&self, x: &Context, action_embedding: &[f64]) -> f64 {
        let mean = self.sentence_mean(&x.query, action_embedding);
        self.reward_weights(x).dot(&mean)
    }

    /// Precomputed `E M_e` rows for a fixed action set; pairs with
    /// [`expected_rewards_with_proj`](Self::expected_rewards_with_proj).
    pub fn action_sentence_proj(&self, action_set: &ActionSet) -> Array2<f64> {
        action_set.embeddings.dot(&self.m_e)
    }

    /// `E[r | x, a]` for every action, given the precomputed projection.
    pub fn expected_rewards_with_proj(&self, x: &Context, action_proj: &Array2<f64>) -> Array1<f64> {
        let q_proj = ArrayView1::from(&x.query[..]).dot(&self.m_q_sentence);
        let weights = self.reward_weights(x);
        let mut out = Array1::zeros(action_proj.nrows());
        for a in 0..action_proj.nrows() {
            let mut value = 0.0;
            for j in 0..q_proj.len() {
                value += weights[j] * self.config.scale * (q_proj[j] + action_proj[[a, j]]).sin();
            }
            out[a] = value;
        }
        out
    }

    /// `E[r | x, a]` for every action of every context, as an
    /// `n x |A|` table.
    pub fn expected_reward_table(&self, contexts: &[Context], action_set: &ActionSet) -> Array2<f64> {
        // q M_q and E M_e decompose, so the per-(x, a) work is one sine pass.
        let action_proj = self.action_sentence_proj(action_set);
        let mut table = Array2::zeros((contexts.len(), action_set.len()));
        for (i, x) in contexts.iter().enumerate() {
            let row = self.expected_rewards_with_proj(x, &action_proj);
            table.row_mut(i).assign(&row);
        }
        table
    }

    /// Collects uniform-random pretraining data, fits the base reward model
    /// `R_hat_0` by MSE, and returns the softmax logging policy whose logits
    /// are the base model's predictions at inverse temperature `beta_0`.
    pub fn build_logging_policy(
        &self,
        action_set: &ActionSet,
        spec: &LoggingPolicySpec,
        seed: u64,
    ) -> Result<SoftmaxPolicy, EnvError> {
        let uniform = SimplePolicy::uniform(action_set.clone());
        let pretrain = self.collect_logged_data(&uniform, spec.pretrain_size, 0, seed);
        let (base_model, _report) = learner::fit_regression(&pretrain, &spec.fit, seed)?;
        Ok(SoftmaxPolicy::new(base_model.mlp, action_set.clone(), spec.beta).expect("dims match by construction"))
    }

    /// Collects `n` logged interactions under `policy`. Each record stores
    /// the action propensity, the realized and expected rewards, and — when
    /// `density_extra_m > 0` — that many extra sentence draws from fresh
    /// `a ~ policy(.|x)` resamples, for density fitting.
    pub fn collect_logged_data(
        &self,
        policy: &dyn ActionPolicy,
        n: usize,
        density_extra_m: usize,
        seed: u64,
    ) -> LoggedDataset {
        let mut r = rng::stream(seed, "collect");
        let prepared = policy.prepare();
        let action_set = policy.action_set();
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.sample_context(&mut r);
            let probs = prepared.probs(&x);
            let action = crate::policies::sample_index(&probs, &mut r);
            let e_a = action_set.embedding(action);
            let sentence = self.generate_sentence(&x.query, e_a.as_slice().unwrap(), &mut r, false);
            let reward = self.simulate_reward(&x, &sentence, &mut r, false);
            let expected = self.expected_reward(&x, e_a.as_slice().unwrap());

            let support = if density_extra_m > 0 {
                let extras: Vec<Sentence> = (0..density_extra_m)
                    .map(|_| {
                        let a = crate::policies::sample_index(&probs, &mut r);
                        let e = action_set.embedding(a);
                        self.generate_sentence(&x.query, e.as_slice().unwrap(), &mut r, false)
                    })
                    .collect();
                Some(extras)
            } else {
                None
            };

            let mut record = LoggedRecord::new(x, action, probs[action], sentence, reward);
            record.expected_reward = Some(expected);
            record.density_support_sentences = support;
            records.push(record);
        }
        LoggedDataset {
            meta: DatasetMeta {
                size: records.len(),
                reward_type: RewardType::Continuous,
                reward_std: self.config.reward_noise,
                action_set: action_set.clone(),
                action_list: None,
                dims: self.config.dims,
                seed,
            },
            records,
        }
    }
}

impl SentenceGenerator for SyntheticEnv {
    fn generate(&self, query: &[f64], action_embedding: &[f64], rng: &mut ChaCha8Rng) -> Sentence {
        self.generate_sentence(query, action_embedding, rng, false)
    }

    fn sentence_dim(&self) -> usize {
        self.config.dims.d_s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn env(seed: u64) -> SyntheticEnv {
        SyntheticEnv::new(EnvConfig::default(), seed)
    }

    #[test]
    fn action_set_shape_and_determinism() {
        let e = env(0);
        let a1 = e.sample_action_set(1, &mut rng::stream(0, "a"));
        assert_eq!(a1.embeddings.shape(), &[1, 5]);
        let a2 = e.sample_action_set(10, &mut rng::stream(0, "a"));
        let a3 = e.sample_action_set(10, &mut rng::stream(0, "a"));
        assert_eq!(a2, a3);
    }

    #[test]
    fn action_embeddings_are_standard_normal() {
        let e = env(1);
        let a = e.sample_action_set(1000, &mut rng::stream(1, "a"));
        let n = a.embeddings.len() as f64;
        let mean = a.embeddings.iter().sum::<f64>() / n;
        let var = a.embeddings.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn context_shapes_and_moments() {
        let e = env(2);
        let x = e.sample_context(&mut rng::stream(2, "c"));
        assert_eq!(x.user.len(), 5);
        assert_eq!(x.query.len(), 5);

        let mut r = rng::stream(3, "c");
        let n = 10_000;
        let mut sums = vec![0.0; 10];
        for _ in 0..n {
            let x = e.sample_context(&mut r);
            for (s, v) in sums.iter_mut().zip(x.features()) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.05);
        }
    }

    #[test]
    fn sentence_mean_at_origin_is_zero_and_bounded() {
        let e = env(4);
        let zero = vec![0.0; 5];
        let s = e.generate_sentence(&zero, &zero, &mut rng::stream(0, "s"), true);
        assert_eq!(s.embedding, vec![0.0; 5]);
        assert!(s.noisy_embedding.is_none());

        let mut r = rng::stream(5, "s");
        for _ in 0..50 {
            let x = e.sample_context(&mut r);
            let a = e.sample_action_set(1, &mut r);
            let s = e.generate_sentence(&x.query, a.embedding(0).as_slice().unwrap(), &mut r, true);
            assert!(s.embedding.iter().all(|v| v.abs() <= 5.0));
        }
    }

    #[test]
    fn sentence_noise_centers_on_the_mean() {
        let e = env(6);
        let mut r = rng::stream(7, "s");
        let x = e.sample_context(&mut r);
        let a = e.sample_action_set(1, &mut r);
        let e_a = a.embedding(0);
        let mean = e.sentence_mean(&x.query, e_a.as_slice().unwrap());
        let n = 10_000;
        let mut sums = Array1::<f64>::zeros(5);
        for _ in 0..n {
            let s = e.generate_sentence(&x.query, e_a.as_slice().unwrap(), &mut r, false);
            sums += &ArrayView1::from(&s.embedding[..]);
        }
        for (s, m) in sums.iter().zip(mean.iter()) {
            // 3 sigma of the sample mean at sigma_s = 1.
            assert!((s / n as f64 - m).abs() < 0.03);
        }
    }

    #[test]
    fn reward_is_linear_in_the_sentence() {
        let e = env(8);
        let mut r = rng::stream(9, "r");
        let x = e.sample_context(&mut r);
        assert_eq!(e.reward_mean(&x, &[0.0; 5]), 0.0);

        let s1: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let s2: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        assert_abs_diff_eq!(
            e.reward_mean(&x, &sum),
            e.reward_mean(&x, &s1) + e.reward_mean(&x, &s2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn reward_noise_centers_on_the_mean() {
        let e = env(10);
        let mut r = rng::stream(11, "r");
        let x = e.sample_context(&mut r);
        let s = Sentence::new(vec![1.0, -0.5, 0.25, 2.0, 0.0]);
        let mean = e.reward_mean(&x, &s.embedding);
        let n = 10_000;
        let total: f64 = (0..n).map(|_| e.simulate_reward(&x, &s, &mut r, false)).sum();
        assert!((total / n as f64 - mean).abs() < 0.03);
    }

    #[test]
    fn expected_reward_matches_monte_carlo() {
        let e = env(12);
        let mut r = rng::stream(13, "mc");
        let x = e.sample_context(&mut r);
        let a = e.sample_action_set(1, &mut r);
        let e_a = a.embedding(0);
        let closed_form = e.expected_reward(&x, e_a.as_slice().unwrap());

        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let s = e.generate_sentence(&x.query, e_a.as_slice().unwrap(), &mut r, false);
            let reward = e.simulate_reward(&x, &s, &mut r, false);
            sum += reward;
            sum_sq += reward * reward;
        }
        let mc_mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mc_mean * mc_mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (closed_form - mc_mean).abs() < 3.0 * se,
            "closed form {closed_form} vs MC {mc_mean} (se {se})"
        );
    }

    #[test]
    fn expected_reward_ignores_noise_levels() {
        let mut loud = EnvConfig::default();
        loud.sentence_noise = 3.0;
        loud.reward_noise = 7.0;
        let quiet = SyntheticEnv::new(EnvConfig::default(), 14);
        let noisy = SyntheticEnv::new(loud, 14);
        let mut r = rng::stream(15, "x");
        let x = quiet.sample_context(&mut r);
        let a = quiet.sample_action_set(3, &mut r);
        for i in 0..3 {
            let e_a = a.embedding(i);
            assert_eq!(
                quiet.expected_reward(&x, e_a.as_slice().unwrap()),
                noisy.expected_reward(&x, e_a.as_slice().unwrap())
            );
        }
    }

    #[test]
    fn expected_reward_table_matches_pointwise_calls() {
        let e = env(16);
        let mut r = rng::stream(17, "t");
        let actions = e.sample_action_set(7, &mut r);
        let contexts: Vec<Context> = (0..4).map(|_| e.sample_context(&mut r)).collect();
        let table = e.expected_reward_table(&contexts, &actions);
        for (i, x) in contexts.iter().enumerate() {
            for a in 0..7 {
                assert_abs_diff_eq!(
                    table[[i, a]],
                    e.expected_reward(x, actions.embedding(a).as_slice().unwrap()),
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn collection_is_valid_and_deterministic() {
        let e = env(18);
        let mut r = rng::stream(19, "as");
        let actions = e.sample_action_set(6, &mut r);
        let policy = SimplePolicy::uniform(actions);
        let d1 = e.collect_logged_data(&policy, 3, 2, 77);
        assert!(d1.validate().is_empty());
        assert_eq!(d1.meta.size, 3);
        assert_eq!(d1.records[0].density_support_sentences.as_ref().unwrap().len(), 2);

        let d2 = e.collect_logged_data(&policy, 3, 2, 77);
        assert_eq!(d1, d2);
    }

    #[test]
    fn propensities_match_policy_probs() {
        let e = env(20);
        let mut r = rng::stream(21, "as");
        let actions = e.sample_action_set(5, &mut r);
        let mut init = rng::stream(22, "p");
        let policy = SoftmaxPolicy::init(10, actions, 1.0, 16, &mut init);
        let data = e.collect_logged_data(&policy, 20, 0, 5);
        for rec in &data.records {
            let probs = policy.action_probs(&rec.context);
            assert_eq!(rec.propensity.unwrap(), probs[rec.action]);
        }
    }

    #[test]
    fn uniform_collection_mean_reward_matches_expectation() {
        let e = env(23);
        let mut r = rng::stream(24, "as");
        let actions = e.sample_action_set(10, &mut r);
        let policy = SimplePolicy::uniform(actions.clone());
        let n = 50_000;
        let data = e.collect_logged_data(&policy, n, 0, 6);

        let mean_r: f64 = data.records.iter().map(|rec| rec.reward).sum::<f64>() / n as f64;
        let mean_expected: f64 = data.records.iter().map(|rec| rec.expected_reward.unwrap()).sum::<f64>() / n as f64;
        let var: f64 = data
            .records
            .iter()
            .map(|rec| (rec.reward - mean_r) * (rec.reward - mean_r))
            .sum::<f64>()
            / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean_r - mean_expected).abs() < 3.0 * se);
    }

    #[test]
    fn logging_policy_with_zero_beta_is_uniform() {
        let e = env(25);
        let mut r = rng::stream(26, "as");
        let actions = e.sample_action_set(8, &mut r);
        let spec = LoggingPolicySpec {
            pretrain_size: 200,
            beta: 0.0,
            fit: FitHyper { epochs: 2, ..FitHyper::default() },
        };
        let policy = e.build_logging_policy(&actions, &spec, 9).unwrap();
        let x = e.sample_context(&mut rng::stream(27, "x"));
        for p in policy.action_probs(&x).iter() {
            assert_abs_diff_eq!(*p, 1.0 / 8.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn logging_policy_is_deterministic_per_seed() {
        let e = env(28);
        let mut r = rng::stream(29, "as");
        let actions = e.sample_action_set(6, &mut r);
        let spec = LoggingPolicySpec {
            pretrain_size: 300,
            beta: 1.0,
            fit: FitHyper { epochs: 3, ..FitHyper::default() },
        };
        let p1 = e.build_logging_policy(&actions, &spec, 30).unwrap();
        let p2 = e.build_logging_policy(&actions, &spec, 30).unwrap();
        assert_eq!(p1.mlp, p2.mlp);
    }
}
