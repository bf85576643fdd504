//! Reparameterized sampling and KL divergences for the two latent families:
//! diagonal Gaussians (private codes) and Gumbel-Softmax relaxed categoricals
//! (shared codes). All functions build tape expressions, so results stay
//! differentiable with respect to the posterior parameters; noise always
//! enters as an explicit argument, never from a hidden RNG.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorId, DEFAULT_LOG_FLOOR};

/// Diagonal Gaussian posterior `N(mu, diag(exp(log_var)))`, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: TensorId,
    pub log_var: TensorId,
}

impl GaussianPosterior {
    pub fn new(tape: &Tape, mu: TensorId, log_var: TensorId) -> Result<Self> {
        if tape.shape(mu) != tape.shape(log_var) {
            return Err(Error::ShapeMismatch {
                op: "gaussian_posterior",
                lhs: tape.shape(mu).to_vec(),
                rhs: tape.shape(log_var).to_vec(),
            });
        }
        Ok(Self { mu, log_var })
    }
}

/// Relaxed categorical posterior given by unnormalized logits and a
/// temperature `tau > 0`, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalPosterior {
    pub logits: TensorId,
    pub tau: f64,
}

impl CategoricalPosterior {
    pub fn new(tape: &Tape, logits: TensorId, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidArgument {
                op: "categorical_posterior",
                expected: "temperature > 0".into(),
                actual: tau.to_string(),
            });
        }
        if tape.value(logits).rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "categorical_posterior",
                expected: "rank-2 logits (batch x classes)".into(),
                actual: format!("shape {:?}", tape.shape(logits)),
            });
        }
        Ok(Self { logits, tau })
    }

    /// Normalized class probabilities (softmax of the logits, no noise).
    pub fn probs(&self, tape: &mut Tape) -> Result<TensorId> {
        tape.row_softmax(self.logits)
    }
}

/// Reparameterized Gaussian draw: `mu + exp(log_var / 2) * noise`, where
/// `noise` is standard-normal and shaped like `mu`.
pub fn gaussian_sample(
    tape: &mut Tape,
    posterior: &GaussianPosterior,
    noise: TensorId,
) -> Result<TensorId> {
    if tape.shape(noise) != tape.shape(posterior.mu) {
        return Err(Error::ShapeMismatch {
            op: "gaussian_sample",
            lhs: tape.shape(posterior.mu).to_vec(),
            rhs: tape.shape(noise).to_vec(),
        });
    }
    let half_log_var = tape.scalar_mul(posterior.log_var, 0.5)?;
    let sigma = tape.exp(half_log_var)?;
    let scaled = tape.hadamard(sigma, noise)?;
    tape.add(posterior.mu, scaled)
}

/// Reparameterized Gumbel-Softmax draw: `softmax((logits + g) / tau)` row-wise,
/// with `g = -log(-log(u))` and `u` uniform strictly inside (0, 1).
///
/// The Gumbel noise is a fixed transformation of `u`, so it enters the tape as
/// a constant; the result is differentiable with respect to the logits only.
pub fn gumbel_softmax_sample(
    tape: &mut Tape,
    posterior: &CategoricalPosterior,
    uniform: TensorId,
) -> Result<TensorId> {
    if tape.shape(uniform) != tape.shape(posterior.logits) {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax_sample",
            lhs: tape.shape(posterior.logits).to_vec(),
            rhs: tape.shape(uniform).to_vec(),
        });
    }
    let u = tape.value(uniform);
    if let Some(&bad) = u.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::InvalidArgument {
            op: "gumbel_softmax_sample",
            expected: "uniform noise strictly inside (0, 1)".into(),
            actual: bad.to_string(),
        });
    }
    let g: Vec<f64> = u.data().iter().map(|&v| -(-v.ln()).ln()).collect();
    let gumbel = tape.constant(Tensor::new(u.shape().to_vec(), g)?);
    let shifted = tape.add(posterior.logits, gumbel)?;
    let scaled = tape.scalar_mul(shifted, 1.0 / posterior.tau)?;
    tape.row_softmax(scaled)
}

/// KL(q || N(0, I)) for a diagonal Gaussian, in closed form, averaged over the
/// batch (rows): `-1/2 * sum(1 + log_var - mu^2 - exp(log_var)) / batch`.
pub fn kl_gaussian_standard(tape: &mut Tape, posterior: &GaussianPosterior) -> Result<TensorId> {
    let shape = tape.shape(posterior.mu).to_vec();
    let batch = tape.value(posterior.mu).rows() as f64;
    let ones = tape.constant(Tensor::full(shape, 1.0));
    let mut acc = tape.add(ones, posterior.log_var)?;
    let mu_sq = tape.square(posterior.mu)?;
    acc = tape.sub(acc, mu_sq)?;
    let var = tape.exp(posterior.log_var)?;
    acc = tape.sub(acc, var)?;
    let total = tape.sum(acc)?;
    tape.scalar_mul(total, -0.5 / batch)
}

/// KL(q || Uniform(K)) for the categorical given by row-softmaxed logits,
/// averaged over the batch: `mean_rows( sum_k p_k log p_k ) + log K`.
///
/// The `log K` shift enters as a constant, so gradients are those of the
/// negative entropy term alone. Probabilities are clamped at a tiny floor
/// inside the log, which leaves exact zeros contributing nothing.
pub fn kl_categorical_uniform(
    tape: &mut Tape,
    posterior: &CategoricalPosterior,
) -> Result<TensorId> {
    let k = tape.value(posterior.logits).cols() as f64;
    let batch = tape.value(posterior.logits).rows() as f64;
    let p = tape.row_softmax(posterior.logits)?;
    let log_p = tape.log_clamped(p, DEFAULT_LOG_FLOOR)?;
    let plogp = tape.hadamard(p, log_p)?;
    let total = tape.sum(plogp)?;
    let neg_entropy = tape.scalar_mul(total, 1.0 / batch)?;
    let log_k = tape.constant(Tensor::scalar(k.ln()));
    tape.add(neg_entropy, log_k)
}
