//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one node per differentiable operation, in creation
//! order, which is also a topological order. [`Graph::backward`] walks the
//! tape once in reverse and returns the gradients of every leaf. Values are
//! reference counted so an op only keeps alive what its backward rule needs;
//! a non-recording graph keeps nothing and doubles as the inference engine.

mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::attention_weights;

/// Given the output gradient and which parents need one, returns one entry
/// per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

#[derive(Clone)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for a later [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that never records; every value is a constant.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        Var {
            graph: self,
            value,
            node: None,
        }
    }

    /// A value whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        if !self.recording {
            return self.constant_rc(value);
        }
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            value,
            node: Some(id),
        }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        parents: &[&Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        self.op_rc(Rc::new(value), parents, backward)
    }

    /// Like [`Graph::op`] for ops whose backward rule shares the output.
    pub(crate) fn op_rc(
        &self,
        value: Rc<Tensor<T>>,
        parents: &[&Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let tracked = self.recording && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return self.constant_rc(value);
        }
        let id = self.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            graph: self,
            value,
            node: Some(id),
        }
    }

    /// Back-propagates from `root`, seeded with ones, and drains the tape.
    pub fn backward(&self, root: &Var<'_, T>) -> Grads<T> {
        let seed = Tensor::ones(root.shape());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: &Var<'_, T>, seed: Tensor<T>) -> Grads<T> {
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut out = HashMap::new();
        let Some(root_id) = root.node else {
            return Grads { by_node: out };
        };
        assert_eq!(seed.shape(), root.shape(), "backward seed shape");
        nodes.truncate(root_id + 1);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(seed);
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else {
                continue;
            };
            match node.backward {
                None => {
                    out.insert(id, g);
                }
                Some(f) => {
                    let need: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let pgrads = f(&g, &need);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(pgrads) {
                        if let (Some(p), Some(pg)) = (parent, pg) {
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Grads { by_node: out }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Grads<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.by_node.get(&id))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.node.and_then(|id| self.by_node.remove(&id))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value_rc())
    }
}
