//! Named parameter store, gradient map, and the SGD update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors with matching momentum buffers.
///
/// Iteration order is insertion order everywhere (updates, checkpoints,
/// initialization), which keeps seeded runs reproducible. Frozen parameters
/// are skipped by the optimizer; `no_decay` marks tensors excluded from
/// weight decay (batch-norm scale/shift and biases).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S: Scalar> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<S>>,
    momenta: Vec<Tensor<S>>,
    frozen: Vec<bool>,
    no_decay: Vec<bool>,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn new() -> Self {
        NetworkParams {
            names: Vec::new(),
            index: HashMap::new(),
            tensors: Vec::new(),
            momenta: Vec::new(),
            frozen: Vec::new(),
            no_decay: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, no_decay: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.momenta.push(Tensor::zeros(tensor.shape()));
        self.tensors.push(tensor);
        self.frozen.push(false);
        self.no_decay.push(no_decay);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))?;
        Ok(&mut self.tensors[i])
    }

    pub fn momentum(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.momenta[i])
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))
    }

    pub fn momentum_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))?;
        Ok(&mut self.momenta[i])
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.index.get(name).map_or(false, |&i| self.frozen[i])
    }

    pub fn no_decay(&self, name: &str) -> bool {
        self.index.get(name).map_or(false, |&i| self.no_decay[i])
    }

    /// Freezes every parameter matched by the predicate, thaws the rest.
    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool) {
        for (i, name) in self.names.iter().enumerate() {
            self.frozen[i] = pred(name);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Converts every tensor (and momentum buffer) to another scalar type.
    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        NetworkParams {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            momenta: self.momenta.iter().map(|t| t.cast()).collect(),
            frozen: self.frozen.clone(),
            no_decay: self.no_decay.clone(),
        }
    }
}

impl<S: Scalar> Default for NetworkParams<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter name. Repeated accumulation adds elementwise,
/// which is how the four puzzle towers fold into one update.
#[derive(Debug, Clone, Default)]
pub struct Grads<S: Scalar> {
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn new() -> Self {
        Grads {
            map: HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: Tensor<S>) -> Result<()> {
        match self.map.get_mut(name) {
            None => {
                self.map.insert(name.to_string(), grad);
            }
            Some(existing) => {
                grad.expect_shape(existing.shape(), "gradient accumulation")?;
                for (a, &b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step with momentum and decoupled-by-name weight decay:
/// `v <- momentum * v + g + wd * p`, then `p <- p - lr * v`.
///
/// Frozen parameters are untouched; a missing gradient for a live parameter
/// is an error so silent partial updates cannot happen.
pub fn sgd_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &Grads<S>,
    cfg: &SgdConfig,
) -> Result<()> {
    for i in 0..params.names.len() {
        if params.frozen[i] {
            continue;
        }
        let name = params.names[i].clone();
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::state(format!("missing gradient for live parameter {name}")))?;
        grad.expect_shape(params.tensors[i].shape(), "sgd gradient")?;
        let wd = if params.no_decay[i] { 0.0 } else { cfg.weight_decay };
        let g = grad.data();
        let p = params.tensors[i].data_mut();
        let v = params.momenta[i].data_mut();
        for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            let step = cfg.momentum * vv.to_acc() + gv.to_acc() + wd * pv.to_acc();
            *vv = S::from_acc(step);
            *pv = S::from_acc(pv.to_acc() - cfg.lr * step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> NetworkParams<f32> {
        let mut p = NetworkParams::new();
        p.insert("w", Tensor::new(&[1], vec![value]).unwrap(), false)
            .unwrap();
        p
    }

    #[test]
    fn update_follows_momentum_recurrence() {
        let mut p = one_param(1.0);
        let mut g = Grads::new();
        g.accumulate("w", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, &cfg).unwrap();
        // v = 0.5, p = 1 - 0.05
        assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-7);
        sgd_step(&mut p, &g, &cfg).unwrap();
        // v = 0.9*0.5 + 0.5 = 0.95, p = 0.95 - 0.095
        assert!((p.get("w").unwrap().data()[0] - 0.855).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_skips_no_decay_params() {
        let mut p = NetworkParams::new();
        p.insert("w", Tensor::new(&[1], vec![1.0f32]).unwrap(), false)
            .unwrap();
        p.insert("gamma", Tensor::new(&[1], vec![1.0f32]).unwrap(), true)
            .unwrap();
        let mut g = Grads::new();
        g.accumulate("w", Tensor::zeros(&[1])).unwrap();
        g.accumulate("gamma", Tensor::zeros(&[1])).unwrap();
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.1,
        };
        sgd_step(&mut p, &g, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(p.get("gamma").unwrap().data()[0], 1.0);
    }

    #[test]
    fn frozen_params_are_untouched_and_need_no_grad() {
        let mut p = one_param(2.0);
        p.set_frozen(|n| n == "w");
        let g = Grads::new();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn missing_gradient_for_live_param_is_an_error() {
        let mut p = one_param(2.0);
        let g = Grads::new();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(sgd_step(&mut p, &g, &cfg).is_err());
    }

    #[test]
    fn grads_accumulate_elementwise() {
        let mut g = Grads::new();
        g.accumulate("w", Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap())
            .unwrap();
        g.accumulate("w", Tensor::new(&[2], vec![0.5f32, -1.0]).unwrap())
            .unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.5, 1.0]);
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut p = one_param(0.0);
        assert!(p.insert("w", Tensor::zeros(&[1]), false).is_err());
    }
}
