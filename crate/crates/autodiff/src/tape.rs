//! The recording tape and the variable handle.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records every operation applied to its variables so gradients can be
/// replayed in reverse. A tape is single-threaded and lives for one step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, false)
    }

    /// A leaf that gradients are accumulated into.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, true)
    }

    /// Like [`Tape::leaf`] but shares the storage instead of copying it.
    pub fn leaf_shared(&self, value: Rc<Array>) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    pub fn constant_shared(&self, value: Rc<Array>) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(
        &self,
        value: Rc<Array>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an operation. `backward` maps the gradient of
    /// the output to one gradient per parent (in order); it is dropped when
    /// no parent needs a gradient.
    pub fn record<F>(&self, value: Array, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Array) -> Vec<Option<Array>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(Rc::new(value), ids, backward, requires_grad)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.backward.is_none() && node.requires_grad {
                grads[id] = Some(grad);
            }
        }
        Grads { grads }
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// The single element of a scalar (or one-element) value.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on a tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn sum_to(grad: Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g.into_shape_with_order(IxDyn(shape))
        .expect("broadcast gradient reshape")
}
