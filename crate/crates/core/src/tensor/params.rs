//! Named parameter storage, initialization, and gradient records.
//!
//! Parameters live in a sorted map from name to shared tensor. Initialization
//! derives one random stream per (seed, name), so values never depend on
//! creation order, and an exact-copy step (used for control blocks cloned from
//! base blocks) is bitwise.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// How a parameter tensor is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// I.i.d. Normal(0, std²).
    Normal { std: f64 },
}

/// Shape-and-init description of one parameter.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Named, shared parameter tensors (sorted by name).
#[derive(Clone, Debug, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Arc<TensorBase<T>>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    /// Builds all tensors from specs; each is filled from a stream derived
    /// from `(seed, name)`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut p = Params::new();
        for s in specs {
            let t = match s.init {
                Init::Zero => TensorBase::zeros(s.rows, s.cols),
                Init::Normal { std } => {
                    let mut stream = rng::stream(&format!("param/{}", s.name), seed, &[]);
                    let sd = T::from_f64(std).unwrap();
                    TensorBase::from_fn(s.rows, s.cols, |_, _| {
                        let z: f64 = stream.sample(StandardNormal);
                        T::from_f64(z).unwrap() * sd
                    })
                }
            };
            p.insert(&s.name, t);
        }
        p
    }

    pub fn insert(&mut self, name: &str, t: TensorBase<T>) {
        self.map.insert(name.to_string(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<TensorBase<T>>> {
        self.map.get(name)
    }

    /// Panics on a missing name: parameter names are a closed internal set,
    /// so absence is a programming error, not an input error.
    pub fn expect(&self, name: &str) -> &Arc<TensorBase<T>> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Bitwise copy of one tensor onto another name.
    pub fn copy_within(&mut self, from: &str, to: &str) {
        let src = Arc::clone(self.expect(from));
        self.map.insert(to.to_string(), src);
    }

    pub fn remove(&mut self, name: &str) -> Option<Arc<TensorBase<T>>> {
        self.map.remove(name)
    }

    /// Mutable access for the optimizer; clones the storage only if a forward
    /// graph still aliases it.
    pub fn get_mut(&mut self, name: &str) -> &mut TensorBase<T> {
        let arc = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        Arc::make_mut(arc)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<TensorBase<T>>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// All parameters of a store registered as leaves on one tape, addressable by
/// name. Build one per forward pass.
pub struct Bound {
    vars: BTreeMap<String, crate::tensor::tape::Var>,
}

impl Bound {
    pub fn bind<T: Scalar>(
        tape: &crate::tensor::tape::Tape<T>,
        params: &Params<T>,
    ) -> Result<Self, crate::error::TensorError> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.param(name, Arc::clone(tensor))?);
        }
        Ok(Bound { vars })
    }

    /// Panics on a missing name (parameter names are a closed internal set).
    pub fn var(&self, name: &str) -> crate::tensor::tape::Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }
}

/// Per-parameter gradients keyed by name; an absent key means a zero gradient.
#[derive(Clone, Debug, Default)]
pub struct GradientRecord<T> {
    map: BTreeMap<String, TensorBase<T>>,
}

impl<T: Scalar> GradientRecord<T> {
    pub fn new() -> Self {
        GradientRecord {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorBase<T>> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBase<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `g` into the slot for `name` (used during the backward sweep).
    pub fn accumulate_one(&mut self, name: &str, g: TensorBase<T>) {
        match self.map.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    /// Merges another record into this one (fixed order, for batch reduction).
    pub fn accumulate(&mut self, other: &GradientRecord<T>) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    /// Scales every gradient in place (batch averaging).
    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            *g = g.scale(c);
        }
    }
}
