use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradError, ParamGrads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Moment estimates for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Bias-corrected Adam update. Parameters without an entry in `grads`
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<(), GradError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| GradError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(GradError::ShapeMismatch(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(value));
        p
    }

    fn grad_of(value: f64) -> ParamGrads {
        ParamGrads::from([("theta".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_the_step() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
        adam.step(&mut p, &grad_of(0.0)).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
        for _ in 0..50 {
            adam.step(&mut p, &grad_of(3.0)).unwrap();
        }
        assert!(p.get("theta").unwrap().item() < -0.4);
    }

    #[test]
    fn converges_on_a_quadratic_bowl() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
        for _ in 0..5000 {
            let theta = p.get("theta").unwrap().item();
            adam.step(&mut p, &grad_of(2.0 * theta)).unwrap();
        }
        assert!(p.get("theta").unwrap().item().abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
        let bad = ParamGrads::from([("theta".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(adam.step(&mut p, &bad), Err(GradError::ShapeMismatch(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
