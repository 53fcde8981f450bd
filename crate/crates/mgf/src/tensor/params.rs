//! Named parameter storage and the bias-corrected adaptive-moment update.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{MgfError, Result};
use crate::rng::Rng;

struct Param {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    trainable: bool,
}

/// Uniquely named parameter tensors with per-parameter optimizer state.
/// Iteration follows creation order, which is deterministic for a fixed
/// model-construction sequence.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

/// Hyperparameters of the adaptive-moment update.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn insert_param(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(MgfError::invalid_argument(format!(
                "parameter {name:?} already registered"
            )));
        }
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            trainable,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(())
    }

    /// Register a trainable parameter.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_param(name, value, true)
    }

    /// Register a non-trainable buffer (running statistics and the like);
    /// persisted with the weights but skipped by the optimizer.
    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_param(name, value, false)
    }

    /// He-style normal initialization for a conv or linear weight with the
    /// given receptive fan-in.
    pub fn register_he(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        self.register_he_scaled(name, shape, fan_in, 1.0, rng)
    }

    /// He initialization damped by `scale`; used where a branch should start
    /// close to inert (residual tails, attention projections, side heads).
    pub fn register_he_scaled(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let sigma = scale * (2.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.normal(sigma));
        self.register(name, t)
    }

    fn lookup(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| {
            MgfError::invalid_argument(format!("unknown parameter {name:?}"))
        })
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.lookup(name)?].value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.lookup(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<Option<&[f64]>> {
        Ok(self.params[self.lookup(name)?].value.grad())
    }

    pub fn accumulate_grad(&mut self, name: &str, contrib: &Tensor) -> Result<()> {
        let i = self.lookup(name)?;
        let p = &mut self.params[i];
        if p.value.shape() != contrib.shape() {
            return Err(MgfError::shape_mismatch(format!(
                "gradient shape {:?} for parameter {:?} of shape {:?}",
                contrib.shape(),
                name,
                p.value.shape()
            )));
        }
        for (g, c) in p.value.grad_mut().iter_mut().zip(contrib.data()) {
            *g += c;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// One bias-corrected adaptive-moment step over every trainable
    /// parameter. Every trainable parameter must carry a gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            if p.value.grad().is_none() {
                return Err(MgfError::InvalidState(format!(
                    "parameter {:?} has no gradient; run backward first",
                    p.name
                )));
            }
        }
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let grad = p.value.grad().unwrap().to_vec();
            for (i, g) in grad.iter().enumerate() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value.data_mut()[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Total number of stored values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Snapshot of all tensors, sorted by name.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Overwrite values from a snapshot; names and shapes must match the
    /// registered set exactly.
    pub fn load_snapshot(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(MgfError::invalid_argument(format!(
                "weight record holds {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let i = self.lookup(name)?;
            if self.params[i].value.shape() != t.shape() {
                return Err(MgfError::shape_mismatch(format!(
                    "stored {:?} has shape {:?}, model expects {:?}",
                    name,
                    t.shape(),
                    self.params[i].value.shape()
                )));
            }
            self.params[i].value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        store
            .accumulate_grad("w", &Tensor::zeros(&[2]))
            .unwrap();
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        for _ in 0..50 {
            store.zero_grads();
            store.accumulate_grad("w", &Tensor::scalar(2.0)).unwrap();
            store.adam_step(&AdamConfig::default()).unwrap();
        }
        assert!(store.value("w").unwrap().item() < 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = (w - 3)^2, grad = 2(w - 3)
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        for _ in 0..2000 {
            let w = store.value("w").unwrap().item();
            store.zero_grads();
            store
                .accumulate_grad("w", &Tensor::scalar(2.0 * (w - 3.0)))
                .unwrap();
            store.adam_step(&cfg).unwrap();
        }
        assert!((store.value("w").unwrap().item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(1.0)).unwrap();
        store.register("b", Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad("a", &Tensor::scalar(1.0)).unwrap();
        assert!(store.adam_step(&AdamConfig::default()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.register("w", Tensor::scalar(0.0)).is_err());
    }
}
