//! Adam with L2 weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Multiplier applied once per `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Restart the epoch count of the schedule at the second stage.
    pub reset_schedule_per_stage: bool,
    /// Clear the moment estimates at the second stage.
    pub reset_moments_between_stages: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            decay_factor: 0.9,
            decay_every: 5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            reset_schedule_per_stage: true,
            reset_moments_between_stages: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }

    /// `lr * decay_factor ^ floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        Self { step: 0, moments: BTreeMap::new() }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// One update with learning rate `lr`. The decay term `wd * theta` is
    /// added to the gradient before the moment updates.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, wd, eps) = (T::lit(lr), T::lit(cfg.weight_decay), T::lit(cfg.eps));
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::validation(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape())));
            }
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, (theta, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi + wd * *theta;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            moments: self.moments.iter().map(|(k, mo)| (k.clone(), Moments { m: mo.m.cast(), v: mo.v.cast() })).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_five_epochs() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(4), 2e-4);
        assert!((cfg.lr_at(5) - 1.8e-4).abs() < 1e-18);
        assert!((cfg.lr_at(19) - 2e-4 * 0.729).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0f64, -1.0]));
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.5, -3.0]))]);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut st = AdamState::default();
        st.step(&mut store, &grads, 0.1, &cfg).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1], vec![2.0f64]));
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[1], vec![0.0]))]);
        let mut st = AdamState::default();
        st.step(&mut store, &grads, 0.01, &OptimizerConfig::default()).unwrap();
        assert!(store.get("w").unwrap().data()[0] < 2.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[1], vec![5.0f64]));
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut st = AdamState::default();
        for _ in 0..2000 {
            let x = store.get("x").unwrap().data()[0];
            let grads = BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![2.0 * (x - 1.0)]))]);
            st.step(&mut store, &grads, 0.05, &cfg).unwrap();
        }
        assert!((store.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
