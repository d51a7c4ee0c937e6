//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Parameters without a gradient are
    /// treated as having a zero gradient. A non-finite gradient aborts the
    /// step before anything changes.
    pub fn step(
        &mut self,
        params: &mut Parameters<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2, eps, lr) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps), T::lit(lr));
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let g = grads.get(name).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Parameters<f64> {
        let mut p = Parameters::default();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.3);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.3]);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &grad(1.0), 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter_and_keeps_state() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut p, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(opt.steps(), 0);
        assert_eq!(p.get("x").unwrap().data(), &[1.0]);
    }
}
