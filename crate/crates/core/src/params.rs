//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Matrix;

/// An ordered collection of named parameter matrices. The insertion order
/// is the slot order used for gradients and for serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn by_slot(&self, slot: usize) -> &Matrix {
        &self.tensors[slot]
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.tensors[slot]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let tensors =
            self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { tensors }
    }

    /// Sub-store of every tensor whose name does not start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        let tensors =
            self.tensors.iter().filter(|(k, _)| !k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { tensors }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(shape_err(format!("{what}: parameter layout mismatch")))
        }
    }

    pub fn zeros_like(&self) -> ParamStore {
        let tensors = self.tensors.iter().map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols()))).collect();
        ParamStore { tensors }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }
}

/// Parameter initialisers.
pub fn init_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Xavier/Glorot-style normal init for a `fan_in × fan_out` weight.
pub fn init_linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    init_normal(fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Lazily turns named parameters into graph leaves.
///
/// A tracked binder creates gradient-carrying `param` leaves keyed by the
/// store's slot order; an untracked one creates plain constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    overlay: Option<&'a ParamStore>,
    tracked: bool,
    frozen_prefixes: Vec<String>,
    cache: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn tracked(store: &'a ParamStore) -> Self {
        Self { store, overlay: None, tracked: true, frozen_prefixes: Vec::new(), cache: HashMap::new() }
    }

    pub fn constant(store: &'a ParamStore) -> Self {
        Self { store, overlay: None, tracked: false, frozen_prefixes: Vec::new(), cache: HashMap::new() }
    }

    /// Constant binder resolving names in `overlay` first, then in `base`.
    pub fn layered(overlay: &'a ParamStore, base: &'a ParamStore) -> Self {
        Self { store: base, overlay: Some(overlay), tracked: false, frozen_prefixes: Vec::new(), cache: HashMap::new() }
    }

    /// Parameters under `prefix` are bound as constants even when tracked.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen_prefixes.push(prefix.into());
        self
    }

    /// Looks up a tensor by name with overlay precedence.
    pub fn lookup(&self, name: &str) -> Option<&Matrix> {
        self.overlay.and_then(|o| o.get(name)).or_else(|| self.store.get(name))
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(overlay) = self.overlay {
            if let Some(slot) = overlay.slot(name) {
                // Overlay slots are offset past the base store to keep cache keys distinct.
                let key = self.store.len() + slot;
                if let Some(v) = self.cache.get(&key) {
                    return *v;
                }
                let v = g.constant(overlay.by_slot(slot).clone());
                self.cache.insert(key, v);
                return v;
            }
        }
        let slot = self.store.slot(name).unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        if let Some(v) = self.cache.get(&slot) {
            return *v;
        }
        let value = self.store.by_slot(slot).clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if self.tracked && !frozen { g.param(slot, value) } else { g.constant(value) };
        self.cache.insert(slot, v);
        v
    }
}

/// Adds `src` into `dst` slot-wise.
pub fn accumulate(dst: &mut ParamGrads, src: ParamGrads) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => d.add_assign(&s),
                None => *d = Some(s),
            }
        }
    }
}
