use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step also subtracts `lr * weight_decay * θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moments for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::Shape(format!("gradient for {} has {} values, expected {}", p.name, g.len(), p.value.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::TrainingDiverged { epoch: None, message: format!("non-finite gradient for {}", p.name) });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(t));
        let bc2 = T::one() - T::of(c.beta2.powi(t));
        let lr = T::of(c.learning_rate);
        let decay = T::of(c.learning_rate * c.weight_decay);
        let eps = T::of(c.eps);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &gi), mi), vi) in p.value.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps) - decay * *theta;
            }
            if p.kind == ParamKind::Rho {
                for r in &mut p.value.data {
                    *r = r.max(T::zero()).min(T::one());
                }
            }
        }
        Ok(())
    }
}
