//! Estimation of the logging policy's marginal sentence density
//! `pi_0(phi(s) | x)` — the denominator of the DSO weight.
//!
//! Two estimators: Monte Carlo (average kernel value against `m` fresh
//! sentence draws from the logging policy) and function approximation (an
//! MLP trained so `f(x, s)` regresses onto `K(s, s')` over independent
//! logging-policy draws `s, s'` at the same context). Predictions are
//! strictly positive: softplus output with a floor, so downstream weight
//! ratios never divide by zero.

use ndarray::Array1;
use thiserror::Error;

use crate::kernels::{kernel_eval, KernelConfig, KernelError};
use crate::learner::{self, FitHyper, FitReport, LearnerError};
use crate::nn::{self, MlpGrads, MlpParams, NnError, OptimizerKind, OptimizerState};
use crate::policies::{ActionPolicy, PreparedPolicy};
use crate::rng::{self, ChaCha8Rng};
use crate::types::{ActionSet, Context, LoggedDataset, Sentence, SentenceGenerator};

/// Lower bound on every density estimate.
pub const DENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fit(#[from] LearnerError),
    #[error("monte-carlo density needs m >= 1, got {0}")]
    InvalidSampleCount(usize),
    #[error(
        "record {record} lacks density support sentences; collect the dataset \
         with density_extra_m >= 1 (or use the monte-carlo estimator)"
    )]
    MissingSupport { record: usize },
    #[error("density input dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

// ── Sentence sampling ───────────────────────────────────────────────────

/// Draws sentences from some conditional distribution at a context.
pub trait SentenceSampler {
    fn sample(&self, x: &Context, rng: &mut ChaCha8Rng) -> Sentence;
}

/// The logging-policy sentence law: `a ~ pi_0(.|x)`, then the generator
/// turns `(q, e_a)` into a sentence.
pub struct LoggingSampler<'a> {
    prepared: PreparedPolicy<'a>,
    action_set: &'a ActionSet,
    generator: &'a dyn SentenceGenerator,
}

impl<'a> LoggingSampler<'a> {
    pub fn new(policy: &'a dyn ActionPolicy, generator: &'a dyn SentenceGenerator) -> Self {
        Self { prepared: policy.prepare(), action_set: policy.action_set(), generator }
    }
}

impl SentenceSampler for LoggingSampler<'_> {
    fn sample(&self, x: &Context, rng: &mut ChaCha8Rng) -> Sentence {
        let probs = self.prepared.probs(x);
        let a = crate::policies::sample_index(&probs, rng);
        self.generator.generate(&x.query, self.action_set.embedding(a).as_slice().unwrap(), rng)
    }
}

// ── Monte-Carlo estimator ───────────────────────────────────────────────

/// `max(floor, (1/m) sum_j K(s, s_j))` over `m` draws `s_j` from `sampler`.
pub fn mc_marginal_density(
    sampler: &dyn SentenceSampler,
    kernel: &KernelConfig,
    x: &Context,
    s: &Sentence,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DensityError> {
    if m == 0 {
        return Err(DensityError::InvalidSampleCount(m));
    }
    let mut sum = 0.0;
    for _ in 0..m {
        let draw = sampler.sample(x, rng);
        sum += kernel_eval(kernel, s, &draw)?;
    }
    Ok((sum / m as f64).max(DENSITY_FLOOR))
}

// ── Function-approximation estimator ────────────────────────────────────

/// Fitted marginal density model: `softplus(mlp(x, s))` floored at
/// [`DENSITY_FLOOR`].
#[derive(Debug, Clone)]
pub struct FaDensity {
    pub mlp: MlpParams,
    pub ctx_dim: usize,
    pub floor: f64,
    /// Mirrors the kernel's embedding choice at fit time so predictions see
    /// the same representation the kernel distances did.
    pub use_noisy_embedding: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of softplus, clamped away from zero for numerical safety.
fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-12);
    y.exp_m1().ln()
}

impl FaDensity {
    fn embedding_of<'s>(&self, s: &'s Sentence) -> &'s [f64] {
        if self.use_noisy_embedding {
            if let Some(noisy) = &s.noisy_embedding {
                return noisy;
            }
        }
        &s.embedding
    }

    /// Positive density prediction at `(x, s)`.
    pub fn predict(&self, x: &Context, s: &Sentence) -> Result<f64, DensityError> {
        let mut input = x.features();
        input.extend_from_slice(self.embedding_of(s));
        if input.len() != self.mlp.in_dim() {
            return Err(DensityError::DimMismatch { expected: self.mlp.in_dim(), got: input.len() });
        }
        let (out, _) = nn::mlp_forward(&self.mlp, &input)?;
        Ok(softplus(out[0]).max(self.floor))
    }
}

/// Defaults for the density fit; the learning rate matches the regression
/// fit, the epoch budget is larger because targets are tiny kernel values.
pub fn default_density_hyper() -> FitHyper {
    FitHyper { epochs: 50, ..FitHyper::default() }
}

/// Fits the function-approximation density model on the pairwise loss
/// `(f(x_i, s) - K(s, s'))^2` over ordered non-self pairs `(s, s')` of
/// independent logging-policy sentences at each logged context.
///
/// Every record must carry at least one density support sentence in addition
/// to its logged sentence; the collector's `density_extra_m` flag provides
/// them.
pub fn fit_density_model(
    dataset: &LoggedDataset,
    kernel: &KernelConfig,
    hyper: &FitHyper,
    seed: u64,
) -> Result<(FaDensity, FitReport), DensityError> {
    if dataset.is_empty() {
        return Err(DensityError::Fit(LearnerError::EmptyDataset));
    }
    let ctx_dim = dataset.meta.dims.d_u + dataset.meta.dims.d_q;
    let d_s = dataset.meta.dims.d_s;

    let mut model = FaDensity {
        mlp: MlpParams::init(ctx_dim + d_s, hyper.hidden, 1, &mut rng::stream(seed, "density-init")),
        ctx_dim,
        floor: DENSITY_FLOOR,
        use_noisy_embedding: kernel.use_noisy_embedding,
    };

    // Flatten (record, ordered pair) into supervised samples.
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (i, record) in dataset.records.iter().enumerate() {
        let support = record
            .density_support_sentences
            .as_ref()
            .filter(|s| !s.is_empty())
            .ok_or(DensityError::MissingSupport { record: i })?;
        let mut sentences: Vec<&Sentence> = Vec::with_capacity(1 + support.len());
        sentences.push(&record.sentence);
        sentences.extend(support.iter());
        let ctx = record.context.features();
        for (u, s) in sentences.iter().enumerate() {
            for (v, s_prime) in sentences.iter().enumerate() {
                if u == v {
                    continue;
                }
                let mut input = ctx.clone();
                input.extend_from_slice(model.embedding_of(s));
                inputs.push(input);
                targets.push(kernel_eval(kernel, s, s_prime)?);
            }
        }
    }

    // Zero output weights plus a bias at the softplus-inverse of the mean
    // target: the model starts as the best constant and the optimizer fits
    // deviations, not the overall scale. Kernel targets span several orders
    // of magnitude, which a generic init cannot reach at this learning rate.
    let mean_target = targets.iter().sum::<f64>() / targets.len() as f64;
    model.mlp.w2.fill(0.0);
    model.mlp.b2[0] = softplus_inverse(mean_target);

    let report = fit_softplus_mse(&mut model.mlp, &inputs, &targets, hyper, seed)?;
    Ok((model, report))
}

/// MSE loop like `learner::fit_mse`, but the prediction is
/// `softplus(raw output)` so gradients flow through the positivity
/// transform.
fn fit_softplus_mse(
    params: &mut MlpParams,
    inputs: &[Vec<f64>],
    targets: &[f64],
    hyper: &FitHyper,
    seed: u64,
) -> Result<FitReport, DensityError> {
    let n = inputs.len();
    let mut split_rng = rng::stream(seed, "density-split");
    let mut order: Vec<usize> = (0..n).collect();
    learner::shuffle(&mut order, &mut split_rng);
    let n_val = if n >= 2 { ((n as f64) * hyper.validation_fraction).floor() as usize } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let loss_on = |params: &MlpParams, idx: &[usize]| -> f64 {
        let mut sum = 0.0;
        for &i in idx {
            let (out, _) = nn::mlp_forward(params, &inputs[i]).expect("shapes fixed");
            let err = softplus(out[0]) - targets[i];
            sum += err * err;
        }
        sum / idx.len().max(1) as f64
    };

    let mut opt = OptimizerState::new(OptimizerKind::Adam, hyper.learning_rate, params);
    let mut shuffle_rng = rng::stream(seed, "density-shuffle");
    let mut epoch_order = train_idx.clone();
    let mut grads = MlpGrads::zeros_like(params);

    let mut best_val = f64::INFINITY;
    let mut best_params: Option<MlpParams> = None;
    let patience = 10usize;
    let mut since_best = 0usize;
    let mut last_train = f64::NAN;

    for epoch in 0..hyper.epochs {
        learner::shuffle(&mut epoch_order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in epoch_order.chunks(hyper.batch_size.max(1)) {
            grads.scale(0.0);
            for &i in batch {
                let (out, cache) = nn::mlp_forward(params, &inputs[i]).expect("shapes fixed");
                let pred = softplus(out[0]);
                let err = pred - targets[i];
                epoch_loss += err * err;
                let upstream = [2.0 * err * sigmoid(out[0]) / batch.len() as f64];
                let g = nn::mlp_backward(params, &inputs[i], &cache, &upstream).expect("shapes fixed");
                grads.scaled_add(1.0, &g);
            }
            nn::optimizer_step(&mut opt, params, &grads).map_err(LearnerError::from)?;
        }
        last_train = epoch_loss / train_idx.len().max(1) as f64;
        if !last_train.is_finite() {
            return Err(DensityError::Fit(LearnerError::Diverged { epoch }));
        }
        if !val_idx.is_empty() {
            let val = loss_on(params, &val_idx);
            if val < best_val {
                best_val = val;
                best_params = Some(params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    if let Some(best) = best_params {
        *params = best;
    }
    let validation_loss = if val_idx.is_empty() { last_train } else { best_val };
    Ok(FitReport { train_loss: last_train, validation_loss })
}

// ── Estimator handle for training loops ─────────────────────────────────

/// Which density estimate a DSO training run uses.
pub enum DensityEstimator<'a> {
    MonteCarlo { sampler: LoggingSampler<'a>, kernel: KernelConfig, m: usize },
    Fitted(&'a FaDensity),
}

impl DensityEstimator<'_> {
    /// Density of every record's logged sentence at its own context.
    /// The marginal density does not depend on the policy being trained,
    /// so one pass before training suffices.
    pub fn densities_for(&self, dataset: &LoggedDataset, seed: u64) -> Result<Vec<f64>, DensityError> {
        match self {
            DensityEstimator::MonteCarlo { sampler, kernel, m } => {
                let mut r = rng::stream(seed, "mc-density");
                dataset
                    .records
                    .iter()
                    .map(|rec| mc_marginal_density(*&sampler, kernel, &rec.context, &rec.sentence, *m, &mut r))
                    .collect()
            }
            DensityEstimator::Fitted(model) => {
                dataset.records.iter().map(|rec| model.predict(&rec.context, &rec.sentence)).collect()
            }
        }
    }
}

/// Exposed for tests: density predictions as a vector over arbitrary pairs.
pub fn predict_many(model: &FaDensity, pairs: &[(&Context, &Sentence)]) -> Result<Array1<f64>, DensityError> {
    let mut out = Array1::zeros(pairs.len());
    for (i, (x, s)) in pairs.iter().enumerate() {
        out[i] = model.predict(x, s)?;
    }
    Ok(out)
}
