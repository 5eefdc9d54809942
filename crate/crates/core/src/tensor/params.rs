//! Named parameter store with Adam updates.
//!
//! Parameters live outside any tape. Each training graph binds the params it
//! uses as leaf nodes (`GraphBinds` dedups so a weight used twice in one
//! graph accumulates both contributions), gradients are harvested back into
//! the store after `backward`, and `adam_step` applies the update.

use super::data::{Shape, TensorData};
use super::scalar::Scalar;
use super::tape::{Gradients, Tape, TensorId};
use crate::error::TensorError;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry<T: Scalar> {
    name: String,
    value: TensorData<T>,
    grad: TensorData<T>,
    m: TensorData<T>,
    v: TensorData<T>,
}

pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), step: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorData<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name `{name}`"
        );
        let shape = value.shape;
        self.entries.push(ParamEntry {
            name,
            value,
            grad: TensorData::zeros(shape),
            m: TensorData::zeros(shape),
            v: TensorData::zeros(shape),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.shape.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &TensorData<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorData<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &TensorData<T> {
        &self.entries[id.0].grad
    }

    /// Ids in insertion order — the canonical ordering for checkpoints.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for v in &mut e.grad.data {
                *v = T::ZERO;
            }
        }
    }

    /// Pull this graph's leaf gradients into the store (scaled by `scale`,
    /// typically 1/batch). Params the graph never used contribute nothing.
    /// A non-finite gradient is reported with the parameter's name.
    pub fn accumulate(
        &mut self,
        binds: &GraphBinds,
        grads: &Gradients<T>,
        scale: f64,
    ) -> Result<(), TensorError> {
        let s = T::from_f64(scale);
        for (pid, tid) in binds.bound() {
            let entry = &mut self.entries[pid.0];
            if let Some(g) = grads.get(tid) {
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient { name: entry.name.clone() });
                }
                for (a, b) in entry.grad.data.iter_mut().zip(&g.data) {
                    *a += s * *b;
                }
            }
        }
        Ok(())
    }

    /// One Adam update from the accumulated gradients, then clears them.
    /// Bias-corrected; with eps ~ 0 the very first step moves every
    /// coordinate by exactly `lr * sign(g)`.
    pub fn adam_step(&mut self, opt: &Adam) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(opt.beta1);
        let b2 = T::from_f64(opt.beta2);
        let one_m_b1 = T::from_f64(1.0 - opt.beta1);
        let one_m_b2 = T::from_f64(1.0 - opt.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - opt.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - opt.beta2.powi(t)));
        let lr = T::from_f64(opt.lr);
        let eps = T::from_f64(opt.eps);
        for e in &mut self.entries {
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                let m = b1 * e.m.data[i] + one_m_b1 * g;
                let v = b2 * e.v.data[i] + one_m_b2 * g * g;
                e.m.data[i] = m;
                e.v.data[i] = v;
                let mhat = m * corr1;
                let vhat = v * corr2;
                e.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                e.grad.data[i] = T::ZERO;
            }
        }
    }

    /// Flat export in insertion order (for checkpoints).
    pub fn export(&self) -> Vec<(String, Shape, Vec<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape, e.value.data.clone()))
            .collect()
    }

    /// Replace a parameter's value; shape must match.
    pub fn load_value(&mut self, id: ParamId, data: &[T]) -> Result<(), TensorError> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "load_value",
                detail: format!(
                    "param `{}` has {} elements, checkpoint supplies {}",
                    e.name,
                    e.value.data.len(),
                    data.len()
                ),
            });
        }
        e.value.data.copy_from_slice(data);
        Ok(())
    }

    /// Reset optimizer state (fresh fine-tuning phase).
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            for v in &mut e.m.data {
                *v = T::ZERO;
            }
            for v in &mut e.v.data {
                *v = T::ZERO;
            }
        }
    }
}

/// Per-graph map from parameter ids to tape leaves.
pub struct GraphBinds {
    map: Vec<Option<TensorId>>,
}

impl GraphBinds {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        GraphBinds { map: vec![None; store.len()] }
    }

    /// Bind a parameter into the tape, reusing the leaf if already bound so
    /// shared weights accumulate gradient across uses.
    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> TensorId {
        let slot = &mut self.map[id.0];
        if let Some(tid) = *slot {
            return tid;
        }
        let tid = tape.leaf(store.value(id).clone(), true);
        *slot = Some(tid);
        tid
    }

    fn bound(&self) -> impl Iterator<Item = (ParamId, TensorId)> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|tid| (ParamId(i), tid)))
    }
}

/// PyTorch-style conv init: U(-b, b) with b = 1/sqrt(fan_in). Weight shape is
/// `[out_c, in_c, kh, kw]`; the matching bias uses the same bound.
pub fn conv_init<T: Scalar, R: Rng>(rng: &mut R, shape: Shape) -> TensorData<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let data = (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    TensorData { shape, data }
}

pub fn bias_init<T: Scalar, R: Rng>(rng: &mut R, out_c: usize, fan_in: usize) -> TensorData<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let shape = Shape::new(1, out_c, 1, 1);
    let data = (0..out_c).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    TensorData { shape, data }
}
