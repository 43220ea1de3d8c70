use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are created lazily on the first step
/// and keep the shape of their parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for warmup schedules).
    pub fn step_with_lr(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::MissingGradient {
                index: grads.len().min(params.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(Error::MissingGradient { index })?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} params, got {}", self.first_moment.len(), params.len()),
            ));
        }
        self.step_count += 1;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.expect("checked above").data();
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let scale = max_norm / (total + 1e-12);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::row_vector(&[1.0, -2.0]);
        let g = Tensor::zeros(&[1, 2]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut a = Tensor::row_vector(&[0.3, 0.7]);
        let mut b = a.clone();
        let g = Tensor::row_vector(&[0.5, -1.5]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut a, &mut b], &[Some(&g), Some(&g)]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut [&mut p], &[None]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient { index: 0 }));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut grads = vec![Tensor::row_vector(&[3.0]), Tensor::row_vector(&[4.0])];
        let before = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = grads.iter().map(|g| g.item() * g.item()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
