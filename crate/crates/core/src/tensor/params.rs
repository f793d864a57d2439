//! Named parameter storage and the per-step graph that binds parameters
//! onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Which part of the system a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Vision,
    Sequence,
    Language,
    Projection,
    Slv,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Vision, ParamGroup::Sequence, ParamGroup::Language, ParamGroup::Projection, ParamGroup::Slv];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", format!("`{}` {:?} vs {:?}", p.name, p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
    }

    /// Total number of scalar values across `ids`.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).len()).sum()
    }

    /// SHA-256 over names, shapes and raw bytes of the selected parameters.
    pub fn digest(&self, mut keep: impl FnMut(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor<f32>>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<f32>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `g` into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<f32>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn l2_norm(&self) -> f32 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    /// Ids that currently hold a gradient with at least one nonzero entry.
    pub fn nonzero(&self) -> Vec<ParamId> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// A tape plus lazy bindings of stored parameters. Trainable parameters
/// become gradient leaves; the rest are bound as constants.
pub struct Graph<'s, T: Real = f32> {
    tape: Tape<T>,
    store: &'s ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self { tape: Tape::new(), store, trainable: mask, bound: vec![None; store.len()] }
    }

    /// A graph in which every parameter is a constant.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = T::lift(self.store.value(id));
        let v = self.tape.leaf(value, self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Collects gradients for every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads {
        let mut out = ParamGrads::new(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let (Some(v), true) = (v, self.trainable[i]) {
                if let Some(g) = grads.get(*v) {
                    out.grads[i] = Some(g.to_f32());
                }
            }
        }
        out
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
