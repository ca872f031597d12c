//! Adam over a [`ParameterSet`].

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParameterSet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, step: 0, m: IndexMap::new(), v: IndexMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every trainable entry must have a gradient.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let lr = self.cfg.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let (b1, b2, lr, eps) = (T::lit(b1), T::lit(b2), T::lit(lr), T::lit(self.cfg.eps));
        let names: Vec<String> = params.trainable().map(|(k, _)| k.to_string()).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            let p = params.get_mut(&name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            let v = self.v.entry(name).or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert_param("w", ArrayD::from_elem(IxDyn(&[2]), 1.0)).unwrap();
        let mut g = ps.zeros_like();
        g["w"] = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }).unwrap();
        opt.step(&mut ps, &g).unwrap();
        let w = ps.get("w").unwrap();
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert_param("w", ArrayD::from_elem(IxDyn(&[3]), 5.0)).unwrap();
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() }).unwrap();
        for _ in 0..2000 {
            let mut g = ps.zeros_like();
            g["w"] = ps.get("w").unwrap().mapv(|v| 2.0 * (v - 1.0));
            opt.step(&mut ps, &g).unwrap();
        }
        assert!(ps.get("w").unwrap().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_bad_config_and_missing_gradients() {
        assert!(Adam::<f32>::new(AdamConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(Adam::<f32>::new(AdamConfig { beta1: 1.0, ..Default::default() }).is_err());
        let mut ps = ParameterSet::<f32>::new();
        ps.insert_param("w", ArrayD::zeros(IxDyn(&[1]))).unwrap();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        assert!(opt.step(&mut ps, &Gradients::new()).is_err());
    }
}
