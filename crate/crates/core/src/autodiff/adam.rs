use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{GradStore, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters flagged frozen in the store are
/// left untouched even when a gradient is present.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let names = params.names();
        for name in names {
            if params.is_frozen(&name) {
                continue;
            }
            let g = match grads.get(&name) {
                Some(g) => g.clone(),
                None => continue,
            };
            let p = params.get_mut(&name)?;
            if g.dim() != p.dim() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter '{name}' shape {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = self.cfg.beta1 * *me + (1.0 - self.cfg.beta1) * ge;
                *ve = self.cfg.beta2 * *ve + (1.0 - self.cfg.beta2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", array![[1.5]]);
        let mut grads = GradStore::new();
        grads.accumulate("w", &array![[0.0]]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap()[(0, 0)], 1.5);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // Scalar with constant gradient 1 and lr 0.1: step 1 moves the
        // parameter by -lr * 1 / (1 + eps), i.e. almost exactly -0.1.
        let mut params = ParamStore::new();
        params.insert("w", array![[0.0]]);
        let mut grads = GradStore::new();
        grads.accumulate("w", &array![[1.0]]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap()[(0, 0)];
        assert!((w + 0.1).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut params = ParamStore::new();
        params.insert("w", array![[2.0]]);
        params.set_frozen("w", true).unwrap();
        let mut grads = GradStore::new();
        grads.accumulate("w", &array![[5.0]]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut params = ParamStore::new();
        params.insert("w", array![[2.0]]);
        let grads = GradStore::new();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap()[(0, 0)], 2.0);
    }
}
