//! Adam optimizer over named network parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::networks::{ParamKey, ViewNetworkSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive moment estimation with the standard coefficients.
#[derive(Debug, Clone)]
pub struct Adam<R: Scalar> {
    pub learning_rate: R,
    pub beta1: R,
    pub beta2: R,
    pub epsilon: R,
    step: u64,
    moments: BTreeMap<ParamKey, (Tensor<R>, Tensor<R>)>,
}

impl<R: Scalar> Adam<R> {
    pub fn new(learning_rate: R) -> Self {
        Adam {
            learning_rate,
            beta1: R::c(0.9),
            beta2: R::c(0.999),
            epsilon: R::c(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update from `(key, gradient)` pairs. Gradients must be
    /// finite; a non-finite entry aborts with a numeric error before any
    /// parameter is touched.
    pub fn step(
        &mut self,
        set: &mut ViewNetworkSet<R>,
        grads: &[(ParamKey, Tensor<R>)],
    ) -> Result<()> {
        for (key, g) in grads {
            if g.first_nonfinite().is_some() {
                return Err(Error::Numeric {
                    node: 0,
                    message: format!("non-finite gradient for {}", key.name()),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let bc1 = R::one() - self.beta1.powi(t as i32);
        let bc2 = R::one() - self.beta2.powi(t as i32);
        for (key, g) in grads {
            let param = set.param_mut(*key);
            let (m, v) = self
                .moments
                .entry(*key)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let pv = param.values_mut();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for i in 0..pv.len() {
                let gi = g.values()[i];
                mv[i] = self.beta1 * mv[i] + (R::one() - self.beta1) * gi;
                vv[i] = self.beta2 * vv[i] + (R::one() - self.beta2) * gi * gi;
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                pv[i] = pv[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
