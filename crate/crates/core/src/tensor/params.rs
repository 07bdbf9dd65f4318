use std::collections::BTreeMap;

use rand::Rng;

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update; `None` disables.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Named parameters, each with a same-shape gradient accumulator.
///
/// The store is the single writer for training: gradients are accumulated
/// and steps applied here, while forward passes only read. `version`
/// increments on every optimizer step.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, ParamId>,
    version: u64,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.slots.len());
        let n = value.len();
        self.slots.push(Slot {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        self.by_name.insert(name, id);
        id
    }

    /// Uniform init in ±√(6/(fan_in+fan_out)).
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::from_raw(vec![fan_out, fan_in], data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a flat gradient buffer laid out as `flat_grads` returns.
    pub fn accumulate_flat(&mut self, flat: &[f64], scale: f64) {
        let mut offset = 0;
        for s in &mut self.slots {
            let n = s.grad.len();
            for (g, f) in s.grad.iter_mut().zip(&flat[offset..offset + n]) {
                *g += scale * f;
            }
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.value.data().iter().copied()).collect()
    }

    /// Overwrites every value from a buffer laid out as `flat_values` returns.
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat value length");
        let mut offset = 0;
        for s in &mut self.slots {
            let v = s.value.data_mut();
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.version += 1;
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.grad.iter().copied()).collect()
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One adaptive-moment step over all parameters, then clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let scale = match cfg.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for s in &mut self.slots {
            let value = s.value.data_mut();
            for i in 0..value.len() {
                let g = s.grad[i] * scale;
                s.first_moment[i] = cfg.beta1 * s.first_moment[i] + (1.0 - cfg.beta1) * g;
                s.second_moment[i] = cfg.beta2 * s.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = s.first_moment[i] / bc1;
                let v_hat = s.second_moment[i] / bc2;
                value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.version += 1;
    }

    /// Snapshot of `(name, value)` pairs in insertion order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.clone()))
            .collect()
    }

    /// Overwrites values from named tensors; every name must already exist
    /// with the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<(), TensorError> {
        for (name, t) in named {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            self.set_value(id, t.clone())?;
        }
        Ok(())
    }
}
