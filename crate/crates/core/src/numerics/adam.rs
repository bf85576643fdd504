use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Adam optimizer state: first/second moment estimates per parameter tensor
/// plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized state for the given parameter list, with the standard
    /// coefficients (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8).
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        learning_rate: f64,
    ) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "adam",
                expected: "non-negative finite learning rate".into(),
                actual: learning_rate.to_string(),
            });
        }
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place. `grads[i]` must have the same
    /// element count as `params[i]`; `names[i]` labels the parameter in error
    /// reports. A `None` gradient means "not reached this step" and is treated
    /// as zero (the parameter keeps its value but moments still decay).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f64]>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || names.len() != params.len()
        {
            return Err(Error::InvalidArgument {
                op: "adam",
                expected: format!("{} parameter tensors", self.m.len()),
                actual: format!(
                    "params={}, grads={}, names={}",
                    params.len(),
                    grads.len(),
                    names.len()
                ),
            });
        }
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if g.len() != params[i].numel() {
                    return Err(Error::InvalidArgument {
                        op: "adam",
                        expected: format!("{} gradient entries for {}", params[i].numel(), names[i]),
                        actual: g.len().to_string(),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: names[i].clone(),
                    });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let zero = vec![];
            let g = grads[i].unwrap_or(&zero);
            for j in 0..param.numel() {
                let gj = g.get(j).copied().unwrap_or(0.0);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param.data_mut()[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
