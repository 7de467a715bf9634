//! Training loops: reward-model regression and policy optimization with any
//! gradient estimator.

use thiserror::Error;

use crate::nn::{self, MlpGrads, MlpParams, NnError, OptimizerKind, OptimizerState};
use crate::policies::RewardModel;
use crate::rng;
use crate::types::LoggedDataset;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{method} gradient became non-finite at step {step}")]
    NonFiniteGradient { method: &'static str, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("method {method} is missing a required input: {what}")]
    MissingInput { method: &'static str, what: &'static str },
}

/// Hyperparameters shared by the supervised fits (reward regression, logging
/// base model, density model).
#[derive(Debug, Clone, Copy)]
pub struct FitHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Held-out fraction used only for loss reporting and early stopping.
    pub validation_fraction: f64,
    pub hidden: usize,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-4, epochs: 30, batch_size: 256, validation_fraction: 0.1, hidden: nn::DEFAULT_HIDDEN }
    }
}

/// Final losses of a supervised fit.
#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Fits `q_hat(x, e_a)` by MSE on the logged `(x, a, r)` triples.
///
/// Adam, epoch-shuffled minibatches, and a 10% validation split whose loss is
/// reported alongside the training loss. Fully deterministic per seed.
pub fn fit_regression(
    dataset: &LoggedDataset,
    hyper: &FitHyper,
    seed: u64,
) -> Result<(RewardModel, FitReport), LearnerError> {
    if dataset.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let ctx_dim = dataset.meta.dims.d_u + dataset.meta.dims.d_q;
    let inputs: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| {
            let mut f = r.context.features();
            f.extend(dataset.meta.action_set.embedding(r.action).iter());
            f
        })
        .collect();
    let targets: Vec<f64> = dataset.records.iter().map(|r| r.reward).collect();

    let mut init_rng = rng::stream(seed, "regression-init");
    let mut params = MlpParams::init(ctx_dim + dataset.meta.dims.d_e, hyper.hidden, 1, &mut init_rng);
    let report = fit_mse(&mut params, &inputs, &targets, hyper, seed)?;
    Ok((RewardModel { mlp: params, ctx_dim }, report))
}

/// Shared MSE loop over arbitrary `(input, target)` pairs; used by the
/// reward regression, the logging base model, and the density model.
/// Keeps the parameters with the best validation loss seen, stopping early
/// after ten epochs without improvement.
pub(crate) fn fit_mse(
    params: &mut MlpParams,
    inputs: &[Vec<f64>],
    targets: &[f64],
    hyper: &FitHyper,
    seed: u64,
) -> Result<FitReport, LearnerError> {
    assert_eq!(inputs.len(), targets.len());
    let n = inputs.len();

    let mut split_rng = rng::stream(seed, "fit-split");
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut split_rng);
    let n_val = if n >= 2 { ((n as f64) * hyper.validation_fraction).floor() as usize } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mse = |params: &MlpParams, idx: &[usize]| -> f64 {
        let mut sum = 0.0;
        for &i in idx {
            let (out, _) = nn::mlp_forward(params, &inputs[i]).expect("shapes fixed");
            let err = out[0] - targets[i];
            sum += err * err;
        }
        sum / idx.len().max(1) as f64
    };

    let mut opt = OptimizerState::new(OptimizerKind::Adam, hyper.learning_rate, params);
    let mut shuffle_rng = rng::stream(seed, "fit-shuffle");
    let mut epoch_order = train_idx.clone();
    let mut grads = MlpGrads::zeros_like(params);

    let mut best_val = f64::INFINITY;
    let mut best_params: Option<MlpParams> = None;
    let patience = 10usize;
    let mut since_best = 0usize;
    let mut last_train = f64::NAN;

    for epoch in 0..hyper.epochs {
        shuffle(&mut epoch_order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in epoch_order.chunks(hyper.batch_size.max(1)) {
            grads.scale(0.0);
            for &i in batch {
                let (out, cache) = nn::mlp_forward(params, &inputs[i]).expect("shapes fixed");
                let err = out[0] - targets[i];
                epoch_loss += err * err;
                let upstream = [2.0 * err / batch.len() as f64];
                let g = nn::mlp_backward(params, &inputs[i], &cache, &upstream).expect("shapes fixed");
                grads.scaled_add(1.0, &g);
            }
            nn::optimizer_step(&mut opt, params, &grads)?;
        }
        last_train = epoch_loss / train_idx.len().max(1) as f64;
        if !last_train.is_finite() {
            return Err(LearnerError::Diverged { epoch });
        }
        if !val_idx.is_empty() {
            let val = mse(params, &val_idx);
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

/// Fisher-Yates shuffle driven by the crate's seeded generator.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut rng::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
