use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::scalar::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Per-parameter gradients; `None` marks a parameter the loss never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots.iter_mut().flatten() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots.iter().flatten().map(|t| t.sum_sq()).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.all_finite())
    }

    /// Scales gradients down so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / (norm + lit(1e-6)));
        }
        norm
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 35.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.ids()
                .map(|id| {
                    let t = p.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Clips, then applies one update at learning rate `lr`. Returns the
    /// pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &mut Grads<T>, lr: f64) -> T {
        let norm = grads.clip_norm(lit(self.config.grad_clip));
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (lit::<T>(b1), lit::<T>(b2));
        let step_size = lit::<T>(lr / bc1);
        let bc2_sqrt = lit::<T>(bc2.sqrt());
        let eps = lit::<T>(self.config.eps);
        let decay = lit::<T>(1.0 - lr * self.config.weight_decay);
        let one = T::one();
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                *pv *= decay;
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = b1t * *mi + (one - b1t) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                *pv -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
