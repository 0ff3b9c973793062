//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        AdamState {
            config,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update. Non-finite gradients abort the step and leave both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr, eps, wd) = (T::c(c.lr), T::c(c.eps), T::c(c.weight_decay));
        let (ibc1, ibc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            for ((theta, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi * ibc1;
                let vh = vi * ibc2;
                *theta -= lr * (mh / (vh.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("theta".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(cfg, &p);
        s.step(&mut p, &grad(1.0)).unwrap();
        assert_eq!(s.t, 1);
        let theta = p.get("theta").unwrap().item();
        assert!((theta + 1e-4).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_no_op_without_decay() {
        let mut p = single(0.37);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(cfg, &p);
        s.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 0.37);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let mut p = single(1.0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut s = AdamState::new(cfg, &p);
        let mut prev = 1.0;
        for _ in 0..10 {
            let th = p.get("theta").unwrap().item();
            s.step(&mut p, &grad(2.0 * th)).unwrap();
            let th = p.get("theta").unwrap().item();
            assert!(th * th < prev);
            prev = th * th;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = single(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let before = s.clone();
        assert!(s.step(&mut p, &grad(f64::NAN)).is_err());
        assert_eq!(s, before);
        assert_eq!(p.get("theta").unwrap().item(), 1.0);
    }

    #[test]
    fn defaults_follow_standard_adam() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay), (1e-4, 1e-5));
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }
}
