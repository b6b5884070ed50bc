use serde::{Deserialize, Serialize};

use super::{GradBundle, MlpNet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: GradBundle,
    second_moment: GradBundle,
    step_count: u64,
}

impl AdamState {
    pub fn new(net: &MlpNet, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: GradBundle::zeros_like(net),
            second_moment: GradBundle::zeros_like(net),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Nothing is modified on error.
    pub fn step(&mut self, net: &mut MlpNet, grads: &GradBundle) -> Result<()> {
        if !grads.is_conformant(net) || !self.first_moment.is_conformant(net) {
            return Err(Error::InvalidArgument(
                "gradient / optimizer state shape does not match the network".into(),
            ));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFinite {
                layer,
                context: "gradient".into(),
            });
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let moments = self
            .first_moment
            .values_mut()
            .zip(self.second_moment.values_mut());
        for ((p, g), (m, v)) in net.params_mut().zip(grads.values()).zip(moments) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        net.ensure_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::seed;

    fn unit_grads(net: &MlpNet, g: f64) -> GradBundle {
        let mut b = GradBundle::zeros_like(net);
        b.values_mut().for_each(|v| *v = g);
        b
    }

    #[test]
    fn zero_gradient_is_noop_except_step_count() {
        let mut net = MlpNet::new(&[3, 4, 2], Activation::Tanh, &mut seed::rng(0)).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let zero = unit_grads(&net, 0.0);
        for _ in 0..5 {
            adam.step(&mut net, &zero).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2 after one step, so the delta is -lr * g / (|g| + eps).
        let mut net = MlpNet::zeros(&[1, 1], Activation::Tanh).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::with_lr(0.1));
        let g = unit_grads(&net, 1.0);
        adam.step(&mut net, &g).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((net.weights(0)[0] - expected).abs() < 1e-15);
        assert!((net.biases(0)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut net = MlpNet::zeros(&[2, 1], Activation::Tanh).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut g = GradBundle::zeros_like(&net);
        g.weights[0] = vec![2.0, -0.5];
        for _ in 0..50 {
            adam.step(&mut net, &g).unwrap();
        }
        assert!(net.weights(0)[0] < 0.0);
        assert!(net.weights(0)[1] > 0.0);
        assert_eq!(net.biases(0)[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut net = MlpNet::new(&[2, 2], Activation::Tanh, &mut seed::rng(4)).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut g = unit_grads(&net, 1.0);
        g.biases[0][1] = f64::INFINITY;
        assert!(matches!(
            adam.step(&mut net, &g),
            Err(Error::NonFinite { layer: 0, .. })
        ));
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = MlpNet::zeros(&[2, 2], Activation::Tanh).unwrap();
        let other = MlpNet::zeros(&[3, 2], Activation::Tanh).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(adam.step(&mut net, &GradBundle::zeros_like(&other)).is_err());
    }
}
