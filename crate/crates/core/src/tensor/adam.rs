use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        AdamState {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads[i]` is the full raw gradient
    /// for `params[i]`; any regularization term must already be folded in.
    /// Nothing is modified when a gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Config(format!(
                "Adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::ShapeMismatch {
                    op_id: i,
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(position) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: i, position });
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut w = Tensor::vector(vec![1.5, -2.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&w]);
        for _ in 0..10 {
            state.update(&mut [&mut w], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(w.data(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut w = Tensor::scalar(0.0);
        let mut state = AdamState::new(cfg, [&w]);
        state.update(&mut [&mut w], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat / sqrt(v_hat) = 1, so the step is lr / (1 + eps)
        assert_relative_eq!(w.item(), -0.1, epsilon = 1e-8);
    }

    #[test]
    fn quadratic_bowl_converges_to_minimizer() {
        // loss = sum_i c_i (w_i - a_i)^2, minimizer w = a
        let target = [3.0, -1.0, 0.25];
        let curv = [1.0, 4.0, 0.5];
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut w = Tensor::zeros(&[3]);
        let mut state = AdamState::new(cfg, [&w]);
        for _ in 0..500 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * curv[i] * (w.data()[i] - target[i])).collect();
            state.update(&mut [&mut w], &[Tensor::vector(g)]).unwrap();
        }
        for i in 0..3 {
            assert!((w.data()[i] - target[i]).abs() < 1e-3, "{:?}", w.data());
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&w]);
        let err = state
            .update(&mut [&mut w], &[Tensor::vector(vec![0.0, f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 0, position: 1 }));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }
}
