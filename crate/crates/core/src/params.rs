//! Named parameter and buffer storage shared by every network module.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Grads, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Trained by the optimizer.
    Param,
    /// Running state such as normalization statistics.
    Buffer,
}

#[derive(Clone)]
pub struct Entry<T> {
    pub name: String,
    pub kind: Kind,
    pub value: Rc<Tensor<T>>,
}

/// Slot-addressed storage. Removing an entry leaves a hole so that ids held
/// by modules stay valid.
#[derive(Clone)]
pub struct ParamStore<T> {
    slots: Vec<Option<Entry<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: Kind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.slots.push(Some(Entry {
            name,
            kind,
            value: Rc::new(value),
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Entry<T>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entry(id).value
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        Rc::clone(&self.entry(id).value)
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        self.slots[id.0]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter slot {} was removed", id.0))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    /// Mutable access; clones the tensor only if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let e = self.slots[id.0].as_mut().expect("live parameter");
        Rc::make_mut(&mut e.value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let e = self.slots[id.0].as_mut().expect("live parameter");
        assert_eq!(e.value.shape(), value.shape(), "set {}: shape", e.name);
        e.value = Rc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, e)| e.name == name).map(|(id, _)| id)
    }

    /// Live entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (ParamId(i), e)))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.iter().filter(|(_, e)| e.kind == Kind::Param)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn scalar_count(&self) -> usize {
        self.params().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| {
                    s.as_ref().map(|e| Entry {
                        name: e.name.clone(),
                        kind: e.kind,
                        value: Rc::new(e.value.cast()),
                    })
                })
                .collect(),
        }
    }
}

/// Deterministic initializer that names parameters as it creates them.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the dotted prefix.
    pub fn scope<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name.as_ref());
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.insert(n, Kind::Param, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.insert(n, Kind::Buffer, value)
    }

    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) -> ParamId {
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Shape) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a normalization layer in training mode.
pub struct StatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-forward context: hands out one tape leaf per parameter and collects
/// running-statistic updates to be applied once the step is over.
pub struct Ctx<'g, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    mode: Mode,
    leaves: RefCell<HashMap<ParamId, Var<'g, T>>>,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            graph,
            store,
            mode,
            leaves: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.graph.leaf_rc(self.store.get_rc(id)))
            .clone()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub fn buffer(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.store.get_rc(id)
    }

    pub(crate) fn record_stats(&self, update: StatUpdate<T>) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients keyed by parameter id for every parameter this context
    /// handed out.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<(ParamId, Tensor<T>)> = leaves
            .iter()
            .filter_map(|(&id, v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Ids of every parameter used by this forward.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.leaves.borrow().keys().copied().collect();
        v.sort();
        v
    }
}

/// Applies running-statistic updates with the given momentum.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<StatUpdate<T>>, momentum: f64) {
    let m = T::c(momentum);
    for u in updates {
        let mean = store.get_mut(u.mean_id);
        for (r, &b) in mean.data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let var = store.get_mut(u.var_id);
        for (r, &b) in var.data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}
