//! Adam and the learning-rate schedules used by both supervised training and
//! test-time adaptation.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

use super::modulation::ModulationSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate for zero-based `step` out of `total` steps.
    /// Cosine: `base * (1 + cos(pi * step / total)) / 2`.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Something Adam can update by parameter name.
pub trait ParamStore<T: Scalar> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T: Scalar> ParamStore<T> for BTreeMap<String, Tensor<T>> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

impl<T: Scalar> ParamStore<T> for ModulationSet<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    config: AdamConfig,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: HashMap::new(),
            second: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of every parameter in `grads`.
    pub fn step<T: Scalar, S: ParamStore<T>>(&mut self, params: &mut S, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params
                .param_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("optimizer: unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv = T::from_f64_lossy(pv.as_f64() - update);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::Cosine;
        assert_abs_diff_eq!(s.lr(1e-3, 0, 10), 1e-3);
        assert_abs_diff_eq!(s.lr(1e-3, 5, 10), 5e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lr(1e-3, 10, 10), 0.0, epsilon = 1e-15);
        assert_eq!(Schedule::Constant.lr(0.1, 7, 10), 0.1);
    }

    fn grads_for(values: &[f64]) -> (BTreeMap<String, Tensor<f64>>, Gradients<f64>) {
        let p = Tensor::new(vec![values.len()], vec![0.0; values.len()]).unwrap();
        let mut tape = Tape::new(["p"]);
        let pv = tape.param("p", &p);
        // p acts as a per-channel scale on x = c, so the loss is sum(p * c)
        let x = tape.input(Tensor::new(vec![1, values.len()], values.to_vec()).unwrap());
        let zeros = tape.input(Tensor::zeros(vec![values.len()]));
        let y = tape.affine_modulate(x, pv, zeros).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        (BTreeMap::from([("p".to_string(), p)]), g)
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let (mut params, g) = grads_for(&[3.0, -1e-3, 250.0, 0.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        let lr = 1e-3;
        adam.step(&mut params, &g, lr).unwrap();
        let p = params["p"].data();
        // closed form of the first step: -lr * g / (|g| + eps)
        for (pv, gv) in p.iter().zip([3.0f64, -1e-3, 250.0, 0.0]) {
            assert!(pv.abs() <= lr * (1.0 + 1e-12));
            assert_abs_diff_eq!(*pv, -lr * gv / (gv.abs() + 1e-8), epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p[0], -lr, epsilon = 1e-11);
        assert_abs_diff_eq!(p[2], -lr, epsilon = 1e-13);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let (_, g) = grads_for(&[1.0]);
        let mut other: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        assert!(AdamState::new(AdamConfig::default()).step(&mut other, &g, 1e-3).is_err());
    }
}
