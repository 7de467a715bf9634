//! Minimal neural substrate: a two-layer ReLU perceptron with exact analytic
//! gradients, Adam and Adagrad optimizers, and softmax utilities.
//!
//! Every function approximator in the crate — policies, reward regressors,
//! the logging base model, and the marginal density model — is one of these
//! networks. [`PairwiseEval`] is the shared fast path for scoring one context
//! against a whole action set: the action-embedding half of the first layer
//! is projected once per batch, so per-context work reduces to a handful of
//! small matrix products.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::rng::ChaCha8Rng;

/// Hidden width used by every model unless a caller overrides it.
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },
}

/// Two-layer perceptron weights: `out = W2 * relu(W1 * input + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `hidden x in`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `out x hidden`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, drawn from `rng`.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        Self {
            w1: glorot(hidden, in_dim, rng),
            b1: Array1::zeros(hidden),
            w2: glorot(out_dim, hidden, rng),
            b2: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened in `w1, b1, w2, b2` row-major order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat); shapes come from `self`.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut it = flat.iter().copied();
        for x in self.w1.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.b1.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.w2.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.b2.iter_mut() {
            *x = it.next().unwrap();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter()).all(|x| x.is_finite())
    }
}

/// Gradient (or any per-parameter accumulator) matching [`MlpParams`] shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array1::zeros(params.b2.raw_dim()),
        }
    }

    /// `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f64, other: &MlpGrads) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .map(|x| x * x)
            .sum();
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter()).all(|x| x.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }
}

/// Pre-activations cached by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `W1 * input + b1` before the ReLU.
    pub pre1: Array1<f64>,
    /// `relu(pre1)`.
    pub hidden: Array1<f64>,
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch { op, expected: expected.to_string(), got: got.to_string() })
    }
}

/// `W2 * relu(W1 * input + b1) + b2` plus the cache needed by
/// [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<(Array1<f64>, ForwardCache), NnError> {
    check_len("mlp_forward", params.in_dim(), input.len())?;
    let x = ArrayView1::from(input);
    let pre1 = params.w1.dot(&x) + &params.b1;
    let hidden = pre1.mapv(|z| z.max(0.0));
    let out = params.w2.dot(&hidden) + &params.b2;
    Ok((out, ForwardCache { pre1, hidden }))
}

/// Exact gradient of `upstream . output` with respect to every parameter.
/// The ReLU subgradient at exactly zero is taken as zero.
pub fn mlp_backward(
    params: &MlpParams,
    input: &[f64],
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<MlpGrads, NnError> {
    check_len("mlp_backward input", params.in_dim(), input.len())?;
    check_len("mlp_backward upstream", params.out_dim(), upstream.len())?;
    let x = ArrayView1::from(input);
    let up = ArrayView1::from(upstream);

    let d_w2 = up
        .view()
        .insert_axis(Axis(1))
        .dot(&cache.hidden.view().insert_axis(Axis(0)));
    let d_b2 = up.to_owned();

    // d hidden = W2^T upstream, gated by the ReLU mask.
    let mut d_pre1 = params.w2.t().dot(&up);
    for (d, &z) in d_pre1.iter_mut().zip(cache.pre1.iter()) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }

    let d_w1 = d_pre1
        .view()
        .insert_axis(Axis(1))
        .dot(&x.insert_axis(Axis(0)));
    let d_b1 = d_pre1;

    Ok(MlpGrads { w1: d_w1, b1: d_b1, w2: d_w2, b2: d_b2 })
}

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAGRAD_EPS: f64 = 1e-10;

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    /// First moment for Adam; unused by Adagrad.
    m: MlpGrads,
    /// Second moment for Adam; squared-gradient accumulator for Adagrad.
    v: MlpGrads,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &MlpParams) -> Self {
        Self { kind, learning_rate, step: 0, m: MlpGrads::zeros_like(params), v: MlpGrads::zeros_like(params) }
    }
}

/// Applies one Adam or Adagrad update in place and bumps the step counter.
/// Non-finite gradients abort so divergence surfaces at its source.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut MlpParams, grads: &MlpGrads) -> Result<(), NnError> {
    if !grads.is_finite() {
        return Err(NnError::NonFiniteGradient { step: state.step });
    }
    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let mut apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            };
            for_each_param(params, grads, &mut state.m, &mut state.v, &mut apply);
        }
        OptimizerKind::Adagrad => {
            let mut apply = |p: &mut f64, g: f64, _m: &mut f64, v: &mut f64| {
                *v += g * g;
                *p -= lr * g / (v.sqrt() + ADAGRAD_EPS);
            };
            for_each_param(params, grads, &mut state.m, &mut state.v, &mut apply);
        }
    }
    Ok(())
}

fn for_each_param(
    params: &mut MlpParams,
    grads: &MlpGrads,
    m: &mut MlpGrads,
    v: &mut MlpGrads,
    f: &mut impl FnMut(&mut f64, f64, &mut f64, &mut f64),
) {
    let zip = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], f: &mut dyn FnMut(&mut f64, f64, &mut f64, &mut f64)| {
        for i in 0..p.len() {
            f(&mut p[i], g[i], &mut m[i], &mut v[i]);
        }
    };
    zip(
        params.w1.as_slice_mut().unwrap(),
        grads.w1.as_slice().unwrap(),
        m.w1.as_slice_mut().unwrap(),
        v.w1.as_slice_mut().unwrap(),
        f,
    );
    zip(params.b1.as_slice_mut().unwrap(), grads.b1.as_slice().unwrap(), m.b1.as_slice_mut().unwrap(), v.b1.as_slice_mut().unwrap(), f);
    zip(
        params.w2.as_slice_mut().unwrap(),
        grads.w2.as_slice().unwrap(),
        m.w2.as_slice_mut().unwrap(),
        v.w2.as_slice_mut().unwrap(),
        f,
    );
    zip(params.b2.as_slice_mut().unwrap(), grads.b2.as_slice().unwrap(), m.b2.as_slice_mut().unwrap(), v.b2.as_slice_mut().unwrap(), f);
}

/// Numerically stable softmax (max subtraction). Entries are positive and
/// sum to one within 1e-12 for any finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Scores one context against every action embedding through a scalar-output
/// MLP whose input is `concat(context_features, action_embedding)`.
///
/// The action half of the first layer (`actions . W1_e^T`) is computed once
/// at construction and reused for every context, which is what makes scoring
/// large action sets affordable inside training loops.
pub struct PairwiseEval<'a> {
    params: &'a MlpParams,
    actions: ArrayView2<'a, f64>,
    ctx_dim: usize,
    /// `|A| x hidden` action-side pre-activations.
    proj: Array2<f64>,
}

/// Hidden activations for one context against all actions; feed back into
/// [`PairwiseEval::accumulate_weighted_grad`].
pub struct PairCache {
    /// `|A| x hidden` post-ReLU activations.
    pub hidden: Array2<f64>,
}

impl<'a> PairwiseEval<'a> {
    /// `params` must be a scalar-output MLP over `ctx_dim + d_e` inputs.
    pub fn new(params: &'a MlpParams, actions: ArrayView2<'a, f64>, ctx_dim: usize) -> Result<Self, NnError> {
        if params.out_dim() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "PairwiseEval",
                expected: "scalar output".to_string(),
                got: format!("{} outputs", params.out_dim()),
            });
        }
        check_len("PairwiseEval", params.in_dim(), ctx_dim + actions.ncols())?;
        let w1_e = params.w1.slice(ndarray::s![.., ctx_dim..]);
        let proj = actions.dot(&w1_e.t());
        Ok(Self { params, actions, ctx_dim, proj })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.nrows()
    }

    /// Scalar score of every action for this context.
    pub fn scores(&self, ctx: &[f64]) -> Result<(Array1<f64>, PairCache), NnError> {
        check_len("PairwiseEval::scores", self.ctx_dim, ctx.len())?;
        let w1_x = self.params.w1.slice(ndarray::s![.., ..self.ctx_dim]);
        let zx = w1_x.dot(&ArrayView1::from(ctx)) + &self.params.b1;
        let mut hidden = self.proj.clone();
        hidden += &zx.view().insert_axis(Axis(0));
        hidden.mapv_inplace(|z| z.max(0.0));
        let scores = hidden.dot(&self.params.w2.row(0)) + self.params.b2[0];
        Ok((scores, PairCache { hidden }))
    }

    /// Adds `sum_a coeffs[a] * d(score(ctx, a))/d(params)` into `grads`.
    ///
    /// Score-function and value-weighted gradients of softmax policies all
    /// reduce to one such weighted accumulation per context.
    pub fn accumulate_weighted_grad(
        &self,
        ctx: &[f64],
        cache: &PairCache,
        coeffs: ArrayView1<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Result<(), NnError> {
        check_len("accumulate_weighted_grad ctx", self.ctx_dim, ctx.len())?;
        check_len("accumulate_weighted_grad coeffs", self.num_actions(), coeffs.len())?;

        // Output layer: d w2 += c^T H, d b2 += sum(c).
        grads.w2.row_mut(0).scaled_add(1.0, &cache.hidden.t().dot(&coeffs));
        grads.b2[0] += coeffs.sum();

        // Hidden layer: U[a, j] = c[a] * w2[j] * relu'(z[a, j]).
        let mut u = cache.hidden.mapv(|h| if h > 0.0 { 1.0 } else { 0.0 });
        u *= &self.params.w2.row(0).insert_axis(Axis(0));
        u *= &coeffs.insert_axis(Axis(1));

        let col_sum = u.sum_axis(Axis(0));
        grads
            .w1
            .slice_mut(ndarray::s![.., self.ctx_dim..])
            .scaled_add(1.0, &u.t().dot(&self.actions));
        grads
            .w1
            .slice_mut(ndarray::s![.., ..self.ctx_dim])
            .scaled_add(1.0, &col_sum.view().insert_axis(Axis(1)).dot(&ArrayView1::from(ctx).insert_axis(Axis(0))));
        grads.b1.scaled_add(1.0, &col_sum);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::{arr1, arr2};

    fn scalar_net(w1: f64, b1: f64, w2: f64, b2: f64) -> MlpParams {
        MlpParams { w1: arr2(&[[w1]]), b1: arr1(&[b1]), w2: arr2(&[[w2]]), b2: arr1(&[b2]) }
    }

    #[test]
    fn forward_zero_params_gives_zero_output() {
        let params = MlpParams {
            w1: Array2::zeros((4, 3)),
            b1: Array1::zeros(4),
            w2: Array2::zeros((2, 4)),
            b2: Array1::zeros(2),
        };
        let (out, _) = mlp_forward(&params, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, arr1(&[0.0, 0.0]));
    }

    #[test]
    fn forward_identity_net_passes_positive_clips_negative() {
        let params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let (out, _) = mlp_forward(&params, &[2.0]).unwrap();
        assert_eq!(out[0], 2.0);
        let (out, _) = mlp_forward(&params, &[-2.0]).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn forward_shape_mismatch_errors() {
        let params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let err = mlp_forward(&params, &[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("expected 1"));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut r = rng::seeded(1);
        let params = MlpParams::init(3, 5, 2, &mut r);
        let input = [0.3, -0.7, 1.1];
        let (_, cache) = mlp_forward(&params, &input).unwrap();
        let grads = mlp_backward(&params, &input, &cache, &[0.0, 0.0]).unwrap();
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn backward_dead_hidden_region_only_reaches_output_bias() {
        // One hidden unit, driven hard negative: W1/b1 grads vanish, the
        // upstream still reaches w2 (times hidden = 0) and b2 directly.
        let params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let input = [-3.0];
        let (_, cache) = mlp_forward(&params, &input).unwrap();
        let grads = mlp_backward(&params, &input, &cache, &[2.0]).unwrap();
        assert_eq!(grads.w1[[0, 0]], 0.0);
        assert_eq!(grads.b1[0], 0.0);
        assert_eq!(grads.w2[[0, 0]], 0.0); // hidden activation is zero
        assert_eq!(grads.b2[0], 2.0);
    }

    /// Central finite differences of `upstream . output` at step 1e-5.
    pub(crate) fn finite_diff_grads(params: &MlpParams, input: &[f64], upstream: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let objective = |p: &MlpParams| -> f64 {
            let (out, _) = mlp_forward(p, input).unwrap();
            out.iter().zip(upstream).map(|(o, u)| o * u).sum()
        };
        let flat = params.to_flat();
        let mut work = params.clone();
        (0..flat.len())
            .map(|i| {
                let mut plus = flat.clone();
                plus[i] += h;
                work.set_from_flat(&plus);
                let up = objective(&work);
                let mut minus = flat.clone();
                minus[i] -= h;
                work.set_from_flat(&minus);
                let down = objective(&work);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::seeded(42);
        for _ in 0..20 {
            let params = MlpParams::init(4, 6, 2, &mut r);
            let input: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let (_, cache) = mlp_forward(&params, &input).unwrap();
            let analytic = mlp_backward(&params, &input, &cache, &upstream).unwrap().to_flat();
            let numeric = finite_diff_grads(&params, &input, &upstream);
            for (a, n) in analytic.iter().zip(&numeric) {
                if n.abs() > 1e-7 {
                    assert_relative_eq!(a, n, max_relative = 1e-4);
                } else {
                    assert_abs_diff_eq!(a, n, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn adam_zero_grads_fixed_point() {
        let mut r = rng::seeded(3);
        let mut params = MlpParams::init(2, 3, 1, &mut r);
        let before = params.clone();
        let grads = MlpGrads::zeros_like(&params);
        let mut state = OptimizerState::new(OptimizerKind::Adam, 1e-3, &params);
        optimizer_step(&mut state, &mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // Single scalar parameter path: g = 0.5, lr = 0.1.
        // m-hat = g, v-hat = g^2, update = -lr * g / (|g| + eps).
        let mut params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let mut grads = MlpGrads::zeros_like(&params);
        grads.w1[[0, 0]] = 0.5;
        let mut state = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        optimizer_step(&mut state, &mut params, &grads).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert_abs_diff_eq!(params.w1[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn adagrad_second_step_is_smaller() {
        let mut params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let mut grads = MlpGrads::zeros_like(&params);
        grads.w1[[0, 0]] = 0.5;
        let mut state = OptimizerState::new(OptimizerKind::Adagrad, 0.1, &params);
        let p0 = params.w1[[0, 0]];
        optimizer_step(&mut state, &mut params, &grads).unwrap();
        let step1 = p0 - params.w1[[0, 0]];
        let p1 = params.w1[[0, 0]];
        optimizer_step(&mut state, &mut params, &grads).unwrap();
        let step2 = p1 - params.w1[[0, 0]];
        assert!(step2 > 0.0 && step2 < step1);
    }

    #[test]
    fn optimizer_rejects_non_finite_grads() {
        let mut params = scalar_net(1.0, 0.0, 1.0, 0.0);
        let mut grads = MlpGrads::zeros_like(&params);
        grads.b2[0] = f64::NAN;
        let mut state = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        assert!(optimizer_step(&mut state, &mut params, &grads).is_err());
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let p = softmax(&[2.0, 2.0, 2.0, 2.0]);
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] > 1.0 - 1e-12 && p[0].is_finite());
        assert!(p[1] >= 0.0 && p[1] < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = softmax(&[0.1, -0.3, 2.4]);
        let shifted = softmax(&[0.1 + 123.0, -0.3 + 123.0, 2.4 + 123.0]);
        for (a, b) in base.iter().zip(&shifted) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let sum: f64 = base.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_scores_match_plain_forward() {
        let mut r = rng::seeded(9);
        let ctx_dim = 3;
        let d_e = 2;
        let params = MlpParams::init(ctx_dim + d_e, 8, 1, &mut r);
        let actions = Array2::from_shape_fn((5, d_e), |_| r.random_range(-1.0..1.0));
        let ctx: Vec<f64> = (0..ctx_dim).map(|_| r.random_range(-1.0..1.0)).collect();

        let eval = PairwiseEval::new(&params, actions.view(), ctx_dim).unwrap();
        let (scores, _) = eval.scores(&ctx).unwrap();
        for a in 0..5 {
            let mut input = ctx.clone();
            input.extend(actions.row(a).iter());
            let (out, _) = mlp_forward(&params, &input).unwrap();
            assert_abs_diff_eq!(scores[a], out[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn pairwise_weighted_grad_matches_summed_backward() {
        let mut r = rng::seeded(10);
        let ctx_dim = 3;
        let d_e = 2;
        let params = MlpParams::init(ctx_dim + d_e, 8, 1, &mut r);
        let actions = Array2::from_shape_fn((5, d_e), |_| r.random_range(-1.0..1.0));
        let ctx: Vec<f64> = (0..ctx_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let coeffs = arr1(&[0.5, -1.0, 0.0, 2.0, 0.25]);

        let eval = PairwiseEval::new(&params, actions.view(), ctx_dim).unwrap();
        let (_, cache) = eval.scores(&ctx).unwrap();
        let mut fast = MlpGrads::zeros_like(&params);
        eval.accumulate_weighted_grad(&ctx, &cache, coeffs.view(), &mut fast).unwrap();

        let mut slow = MlpGrads::zeros_like(&params);
        for a in 0..5 {
            let mut input = ctx.clone();
            input.extend(actions.row(a).iter());
            let (_, fc) = mlp_forward(&params, &input).unwrap();
            let g = mlp_backward(&params, &input, &fc, &[1.0]).unwrap();
            slow.scaled_add(coeffs[a], &g);
        }
        for (f, s) in fast.to_flat().iter().zip(slow.to_flat()) {
            assert_abs_diff_eq!(f, &s, epsilon = 1e-10);
        }
    }
}
