//! Named parameter storage and the AdamW update.

use serde::{Deserialize, Serialize};

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// The var bound for this parameter by [`ParamStore::bind`].
    pub fn of<'t, T: Real>(self, bound: &[Var<'t, T>]) -> Var<'t, T> {
        bound[self.0]
    }
}

/// A trainable tensor with its gradient accumulator and AdamW moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
    step: u64,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value by name, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| contract("param_store", format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(crate::error::shape_err("param_store", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Records every parameter as a tracked leaf, in id order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Records every parameter as an untracked constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of the vars returned by [`Self::bind`].
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &[Var<'_, T>]) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            let g = grads.wrt(v);
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params.iter().map(|p| p.grad.norm_sq()).sum::<T>().sqrt()
    }

    /// Same names and values in another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let norm = store.grad_norm();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for p in &mut store.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_steps: 100,
            clip: 1.0,
            eps: 1e-8,
        }
    }
}

/// AdamW with linear warmup and global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Learning rate of update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.lr
        } else {
            c.lr * (step as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    /// Clips, then applies one update to every parameter. Returns the
    /// gradient norm measured before clipping.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> f64 {
        let c = self.config;
        let norm = if c.clip > 0.0 {
            clip_global_norm(store, T::lit(c.clip))
        } else {
            store.grad_norm()
        };
        self.steps += 1;
        let lr = T::lit(self.lr_at(self.steps));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (eps, wd) = (T::lit(c.eps), T::lit(c.weight_decay));
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for (((x, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x = *x * (T::one() - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        norm.as_f64()
    }
}
