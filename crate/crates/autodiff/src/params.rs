//! Named parameter storage, per-step binding onto a tape, and Adam.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tape::{Array, Grads, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Array>>,
    by_name: HashMap<String, ParamId>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.names.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Rc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Rc<Array> {
        Rc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Array) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "set: shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = Rc::new(value);
    }
}

/// Exposes a [`ParamStore`] on a tape. Each parameter becomes a leaf the
/// first time it is used; a frozen binding yields constants instead.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.shared(id);
            if self.trainable {
                self.tape.leaf_shared(value)
            } else {
                self.tape.constant_shared(value)
            }
        })
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect(&self, grads: &mut Grads) -> Vec<(ParamId, Array)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments live alongside the store they update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: Vec<u64>,
    first: Vec<Option<Array>>,
    second: Vec<Option<Array>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: vec![0; store.len()],
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Array)>) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (id, g) in grads {
            let i = id.index();
            self.step[i] += 1;
            let t = self.step[i] as i32;
            let m = self.first[i].get_or_insert_with(|| Array::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.second[i].get_or_insert_with(|| Array::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let m = self.first[i].as_ref().unwrap();
            let v = self.second[i].as_ref().unwrap();
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
