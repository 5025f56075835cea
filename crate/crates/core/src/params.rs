//! Named parameter storage and its binding into a gradient tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// Every trainable tensor of a model, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`,
    /// checking shapes against what is already present here.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            if let Some(existing) = self.tensors.get(name) {
                if existing.shape() != t.shape() {
                    return Err(Error::ParamShape {
                        name: name.to_string(),
                        expected: existing.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
            self.tensors.insert(name.to_string(), t.clone());
            n += 1;
        }
        Ok(n)
    }

    /// Verifies that `self` holds exactly the names and shapes of `expected`.
    pub fn check_against(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            let found = self.get(name)?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Which parameters receive gradients during a step.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    /// Names starting with any of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<S: Into<String>>(p: impl IntoIterator<Item = S>) -> Self {
        Trainable::Prefixes(p.into_iter().map(Into::into).collect())
    }

    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Lazily turns store entries into graph leaves, once per name.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: Trainable,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> Binder<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: Trainable) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binder whose parameters are already present on the tape as `vars`.
    pub fn with_vars(
        graph: &'g Graph,
        store: &'s ParamStore,
        vars: impl IntoIterator<Item = (String, Var<'g>)>,
    ) -> Self {
        let b = Self::new(graph, store, Trainable::All);
        b.bound.borrow_mut().extend(vars);
        b
    }

    /// Binder for evaluation: nothing records gradients.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, Trainable::Nothing)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.graph.leaf(t, self.trainable.includes(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Adds `src` into `acc` name by name.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (name, g) in src {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Multiplies every accumulated gradient by `s`.
pub fn scale_grads(acc: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in acc.values_mut() {
        g.scale_in_place(s);
    }
}
