use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Mat, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct Param<T: Scalar> {
    name: String,
    value: Arc<Mat<T>>,
    trainable: bool,
}

/// Named parameter tensors with a per-tensor trainable flag.
///
/// Insertion order is preserved, so iteration (and therefore serialisation)
/// is deterministic.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: &str, value: Mat<T>, trainable: bool) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.params[id.0].value = Arc::new(value);
            self.params[id.0].trainable = trainable;
            return id;
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), value: Arc::new(value), trainable });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> ParamId {
        self.insert(name, Array2::zeros((rows, cols)), trainable)
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: T, trainable: bool) -> ParamId {
        self.insert(name, Array2::from_elem((rows, cols), v), trainable)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let m = Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)));
        self.insert(name, m, trainable)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::config(format!("missing parameter tensor `{name}`")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Mat<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Applies `f(name)` to decide the trainable flag of every tensor.
    pub fn set_trainable_where(&mut self, mut f: impl FnMut(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = f(&p.name);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> + '_ {
        self.params.iter().map(|p| (p.name.as_str(), &*p.value))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every tensor into another scalar type, preserving names and flags.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let m = p.value.mapv(|v| U::of(v.to_f64_lossy()));
            out.insert(&p.name, m, p.trainable);
        }
        out
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.params.push(p.clone());
            out.index.insert(p.name.clone(), ParamId(out.params.len() - 1));
        }
        out
    }

    /// Copies all tensors of `other` into `self` (replacing same-named ones).
    pub fn merge_from(&mut self, other: &ParamStore<T>) {
        for p in &other.params {
            self.insert(&p.name, (*p.value).clone(), p.trainable);
        }
    }
}

/// A view of a store used while building a graph.
///
/// With `train == false` every tensor enters the graph as a constant, which is
/// how frozen sub-networks are evaluated.
#[derive(Clone, Copy)]
pub struct Bind<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Scalar> Bind<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Bind { store, train: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Bind { store, train: false }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    /// Graph node for the named tensor. Panics if absent: model code only asks
    /// for tensors its own initialiser created, and checkpoints are validated
    /// against the architecture before use.
    pub fn node(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not present in store"));
        let v = self.store.value_arc(id);
        if self.train && self.store.is_trainable(id) {
            g.param_leaf(id, v)
        } else {
            g.input_arc(v)
        }
    }

    pub fn value(&self, name: &str) -> &Mat<T> {
        self.store.get(name).unwrap_or_else(|| panic!("parameter `{name}` not present in store"))
    }
}

/// Gradients keyed by parameter id.
#[derive(Clone)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<ParamId, Mat<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Gradients { map: BTreeMap::new() }
    }
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn accumulate(&mut self, id: ParamId, g: Mat<T>) {
        match self.map.get_mut(&id) {
            Some(e) => *e += &g,
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat<T>)> + '_ {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `scale · other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (&id, g) in &other.map {
            let scaled = g.mapv(|v| v * scale);
            self.accumulate(id, scaled);
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> T {
        self.map
            .values()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
