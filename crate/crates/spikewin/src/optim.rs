//! Named parameter storage, the forward-pass binder, and AdamW.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Handle into a [`ParamStore`]; stable for the life of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey(usize);

struct Entry<R: Real> {
    name: String,
    tensor: Tensor<R>,
    /// Buffers (running statistics) are stored but never optimized.
    trainable: bool,
    m: Option<Vec<R>>,
    v: Option<Vec<R>>,
}

/// Insertion-ordered collection of named tensors plus optimizer state.
pub struct ParamStore<R: Real> {
    entries: Vec<Entry<R>>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    fn push(&mut self, name: &str, tensor: Tensor<R>, trainable: bool) -> Result<ParamKey> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        let key = ParamKey(self.entries.len());
        self.index.insert(name.to_string(), key.0);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor: if trainable { tensor.with_grad() } else { tensor },
            trainable,
            m: None,
            v: None,
        });
        Ok(key)
    }

    /// Register a trainable parameter.
    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) -> Result<ParamKey> {
        self.push(name, tensor, true)
    }

    /// Register a non-trainable buffer (e.g. running statistics).
    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor<R>) -> Result<ParamKey> {
        self.push(name, tensor, false)
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&i| ParamKey(i))
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor<R> {
        &self.entries[key.0].tensor
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor<R> {
        &mut self.entries[key.0].tensor
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.entries[key.0].name
    }

    pub fn is_trainable(&self, key: ParamKey) -> bool {
        self.entries[key.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.entries.len()).map(ParamKey)
    }

    /// Total scalar count across trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Optimizer moments for checkpointing (empty slices until first step).
    pub fn moments(&self, key: ParamKey) -> (&[R], &[R]) {
        let e = &self.entries[key.0];
        (
            e.m.as_deref().unwrap_or(&[]),
            e.v.as_deref().unwrap_or(&[]),
        )
    }

    pub fn set_moments(&mut self, key: ParamKey, m: Vec<R>, v: Vec<R>) -> Result<()> {
        let n = self.entries[key.0].tensor.numel();
        if m.len() != n || v.len() != n {
            return Err(Error::shape(format!(
                "moment arrays ({}, {}) do not match parameter '{}' of {} scalars",
                m.len(),
                v.len(),
                self.entries[key.0].name,
                n
            )));
        }
        self.entries[key.0].m = Some(m);
        self.entries[key.0].v = Some(v);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Copy gradients from a backward sweep into the parameter tensors.
    /// `ids` is the binding table from [`Ctx::into_parts`]; trainable
    /// parameters that did not participate get explicit zeros.
    pub fn absorb_grads(&mut self, ids: &[Option<ValueId>], grads: &Gradients<R>) -> Result<()> {
        if ids.len() != self.entries.len() {
            return Err(Error::State(format!(
                "binding table covers {} parameters, store has {}",
                ids.len(),
                self.entries.len()
            )));
        }
        for key in self.keys().collect::<Vec<_>>() {
            if !self.entries[key.0].trainable {
                continue;
            }
            let n = self.entries[key.0].tensor.numel();
            let g = match ids[key.0] {
                Some(id) => grads.dense(id, n),
                None => vec![R::zero(); n],
            };
            self.entries[key.0].tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// One AdamW update over every trainable parameter. Decoupled weight
    /// decay shrinks the parameter before the moment-driven step.
    pub fn adamw_step(&mut self, lr: R, wd: R, betas: (R, R), eps: R) -> Result<()> {
        for e in &self.entries {
            if e.trainable && e.tensor.grad().is_none() {
                return Err(Error::State(format!(
                    "adamw_step before gradients were populated (parameter '{}')",
                    e.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = betas;
        let bc1 = R::one() - b1.powi(t);
        let bc2 = R::one() - b2.powi(t);
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let n = e.tensor.numel();
            let g = e.tensor.grad().expect("checked above").to_vec();
            let m = e.m.get_or_insert_with(|| vec![R::zero(); n]);
            let v = e.v.get_or_insert_with(|| vec![R::zero(); n]);
            let data = e.tensor.data_mut();
            for i in 0..n {
                data[i] -= lr * wd * data[i];
                m[i] = b1 * m[i] + (R::one() - b1) * g[i];
                v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Fold raw batch statistics into running buffers with momentum 0.9:
    /// `running = 0.9 * running + 0.1 * batch`.
    pub fn fold_running(&mut self, updates: &[(ParamKey, Vec<R>)]) -> Result<()> {
        let momentum = R::of(0.9);
        let keep = R::of(0.1);
        for (key, batch) in updates {
            let t = &mut self.entries[key.0];
            if t.tensor.numel() != batch.len() {
                return Err(Error::shape(format!(
                    "running-stat update length {} vs buffer '{}' length {}",
                    batch.len(),
                    t.name,
                    t.tensor.numel()
                )));
            }
            for (r, &b) in t.tensor.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + keep * b;
            }
        }
        Ok(())
    }

    /// Replace running statistics outright with the mean of the given
    /// updates, grouped per buffer. Used to re-estimate batch-norm state at
    /// the final parameters, where the momentum average would lag.
    pub fn assign_running(&mut self, updates: &[(ParamKey, Vec<R>)]) -> Result<()> {
        let mut sums: Vec<(ParamKey, Vec<R>, usize)> = Vec::new();
        for (key, batch) in updates {
            match sums.iter_mut().find(|(k, _, _)| k == key) {
                Some((_, acc, n)) => {
                    if acc.len() != batch.len() {
                        return Err(Error::shape(format!(
                            "running-stat update length {} vs {} for '{}'",
                            batch.len(),
                            acc.len(),
                            self.entries[key.0].name
                        )));
                    }
                    for (a, &b) in acc.iter_mut().zip(batch) {
                        *a = *a + b;
                    }
                    *n += 1;
                }
                None => sums.push((*key, batch.clone(), 1)),
            }
        }
        for (key, acc, n) in sums {
            let t = &mut self.entries[key.0];
            if t.tensor.numel() != acc.len() {
                return Err(Error::shape(format!(
                    "running-stat update length {} vs buffer '{}' length {}",
                    acc.len(),
                    t.name,
                    t.tensor.numel()
                )));
            }
            let inv = R::of(1.0 / n as f64);
            for (r, &a) in t.tensor.data_mut().iter_mut().zip(&acc) {
                *r = a * inv;
            }
        }
        Ok(())
    }
}

/// Per-forward binder: lazily records store parameters onto a tape and
/// remembers the mapping so gradients can be routed back after backward.
/// Also accumulates pending batch-statistic updates so the forward pass
/// itself never mutates the store.
pub struct Ctx<'s, R: Real> {
    store: &'s ParamStore<R>,
    ids: Vec<Option<ValueId>>,
    pub stat_updates: Vec<(ParamKey, Vec<R>)>,
    pub train: bool,
}

impl<'s, R: Real> Ctx<'s, R> {
    pub fn new(store: &'s ParamStore<R>, train: bool) -> Self {
        Ctx {
            store,
            ids: vec![None; store.len()],
            stat_updates: Vec::new(),
            train,
        }
    }

    pub fn store(&self) -> &'s ParamStore<R> {
        self.store
    }

    /// Tape id for a parameter, recording it as a leaf on first use.
    pub fn id(&mut self, tape: &mut Tape<R>, key: ParamKey) -> ValueId {
        if let Some(id) = self.ids[key.0] {
            return id;
        }
        let id = tape.leaf(self.store.tensor(key));
        self.ids[key.0] = Some(id);
        id
    }

    /// Raw buffer values (running statistics) without recording a node.
    pub fn buffer(&self, key: ParamKey) -> &[R] {
        self.store.tensor(key).data()
    }

    pub fn bound_id(&self, key: ParamKey) -> Option<ValueId> {
        self.ids[key.0]
    }

    /// Release the store borrow, handing back the parameter→tape bindings
    /// and the queued batch-statistic updates so the store can be mutated.
    pub fn into_parts(self) -> (Vec<Option<ValueId>>, Vec<(ParamKey, Vec<R>)>) {
        (self.ids, self.stat_updates)
    }
}
