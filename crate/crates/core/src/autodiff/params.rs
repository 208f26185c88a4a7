use std::collections::HashMap;

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
    pub step: u64,
}

/// Named trainable tensors with gradient slots and Adam state.
///
/// Names are dotted paths (`pte.gru_fwd.W_z`); the first segment is the
/// parameter group. Insertion order is preserved and is the order used for
/// serialization.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn insert_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn insert_bias(&mut self, name: &str, size: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(&[size]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Overwrites a parameter's values. The shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        self.set_value(id, value)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.params[id.0].grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Distinct leading name segments, in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            let g = p.name.split('.').next().unwrap_or("").to_string();
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update over every parameter, then zeroes the
    /// gradient slots. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store
            .params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter `{}`",
                p.name
            )));
        }
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = scalar_store(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn shapes_are_immutable() {
        let (mut s, id) = scalar_store(0.0);
        assert!(s.set_value(id, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut s, id) = scalar_store(1.25);
        Adam::new(0.001).step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 1.25);
        assert_eq!(s.get(id).step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        s.accumulate_grad(id, &[0.5]);
        Adam::new(0.001).step(&mut s).unwrap();
        let moved = s.value(id).data()[0];
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((moved - expected).abs() < 1e-15);
        assert!((moved.abs() - 0.001).abs() < 1e-10);
        assert_eq!(s.grad(id), &[0.0]);
    }

    #[test]
    fn two_step_trace_matches_hand_recurrences() {
        let (mut s, id) = scalar_store(0.0);
        let adam = Adam::new(0.001);
        // Independent evaluation of the recurrences for g = (1, 1).
        let (b1, b2, eps, lr) = (0.9_f64, 0.999_f64, 1e-8, 0.001);
        let mut x = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        for _ in 0..2 {
            s.accumulate_grad(id, &[1.0]);
            adam.step(&mut s).unwrap();
        }
        assert!((s.value(id).data()[0] - x).abs() < 1e-15);
        // With a constant gradient both bias-corrected moments are exactly 1.
        assert!((x + 2.0 * lr / (1.0 + eps)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(0.0);
        s.accumulate_grad(id, &[f64::NAN]);
        let err = Adam::new(0.001).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }
}
