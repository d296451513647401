use serde::{Deserialize, Serialize};

use super::UNet;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments, one accumulator pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(net: &UNet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = net.slots().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn update(&mut self, net: &mut UNet<T>, grads: &UNet<T>) -> Result<()> {
        let params = net.slots_mut();
        let grads = grads.slots();
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match the network".into()));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (lr, b1, b2, eps) = (
            T::from_f64_lossy(learning_rate),
            T::from_f64_lossy(beta1),
            T::from_f64_lossy(beta2),
            T::from_f64_lossy(eps),
        );
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::ShapeMismatch("gradient shape differs from parameter".into()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
