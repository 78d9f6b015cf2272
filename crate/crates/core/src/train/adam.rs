//! Adam with bias correction.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state: step count and first/second moment estimates per
/// parameter tensor, in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update with `grads` (one flat gradient per parameter).
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.learning_rate / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if g.len() != m.len() {
                return Err(Error::Shape(format!("gradient for {} has {} entries, expected {}", params.name(id), g.len(), m.len())));
            }
            if c.learning_rate == 0.0 {
                for j in 0..g.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                }
                continue;
            }
            let p = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() }, &p);
        adam.update(&mut p, &[vec![4.0, -0.5, 0.0]]).unwrap();
        let w = p.get(p.find("w").unwrap()).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - -1.9).abs() < 1e-6 && w[2] == 0.5);
    }

    #[test]
    fn matches_reference_recursion() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(vec![1], vec![0.3f32]));
        let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &p);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * w - 1.0;
            adam.update(&mut p, &[vec![g as f32]]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            let got = p.get(p.find("w").unwrap()).data()[0] as f64;
            assert!((got - w).abs() < 1e-5, "step {t}: {got} vs {w}");
            w = got;
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(vec![2], vec![0.1f32, 0.2]));
        let before = p.checksum();
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }, &p);
        adam.update(&mut p, &[vec![1.0, -1.0]]).unwrap();
        assert_eq!(p.checksum(), before);
        assert_eq!(adam.step, 1);
    }
}
