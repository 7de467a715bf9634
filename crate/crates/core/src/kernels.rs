//! Kernel functions over sentence embeddings.
//!
//! Both families integrate to one over the sentence space: the Gaussian
//! density `(2 pi tau^2)^(-d/2) exp(-||s - s'||^2 / (2 tau^2))` and a uniform
//! box of per-coordinate half-width `3 tau` with density `(6 tau)^(-d)`. The
//! box width makes the uniform kernel cover the same range a Gaussian of the
//! same bandwidth covers with probability above 99%.

use std::f64::consts::PI;

use thiserror::Error;

use crate::types::Sentence;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("sentence dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// Kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Gaussian,
    Uniform,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Uniform => "uniform",
        }
    }
}

/// Kernel family, bandwidth, and which embedding carries the distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Bandwidth `tau`, strictly positive.
    pub bandwidth: f64,
    /// When set, distances use the noise-perturbed embedding of any sentence
    /// that carries one; clean embeddings are the fallback. Rewards never
    /// flow through this switch, only kernel distances do.
    pub use_noisy_embedding: bool,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive, got {bandwidth}");
        Self { family, bandwidth, use_noisy_embedding: false }
    }

    pub fn with_noisy_embedding(mut self, on: bool) -> Self {
        self.use_noisy_embedding = on;
        self
    }

    fn embedding_of<'a>(&self, s: &'a Sentence) -> &'a [f64] {
        if self.use_noisy_embedding {
            if let Some(noisy) = &s.noisy_embedding {
                return noisy;
            }
        }
        &s.embedding
    }
}

/// Kernel density of `s_prime` around `s`. Symmetric in its arguments and
/// nonnegative; zero outside the box for the uniform family.
pub fn kernel_eval(cfg: &KernelConfig, s: &Sentence, s_prime: &Sentence) -> Result<f64, KernelError> {
    let a = cfg.embedding_of(s);
    let b = cfg.embedding_of(s_prime);
    if a.len() != b.len() {
        return Err(KernelError::DimMismatch { left: a.len(), right: b.len() });
    }
    let d = a.len() as f64;
    let tau = cfg.bandwidth;
    match cfg.family {
        KernelFamily::Gaussian => {
            let sq_dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let norm = (2.0 * PI * tau * tau).powf(-d / 2.0);
            Ok(norm * (-sq_dist / (2.0 * tau * tau)).exp())
        }
        KernelFamily::Uniform => {
            let half_width = 3.0 * tau;
            let inside = a.iter().zip(b).all(|(x, y)| (x - y).abs() <= half_width);
            if inside {
                Ok((6.0 * tau).powf(-d))
            } else {
                Ok(0.0)
            }
        }
    }
}
