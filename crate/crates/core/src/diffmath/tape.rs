//! Define-by-run gradient tape.
//!
//! Nodes are appended in evaluation order, so creation order is already a
//! topological order and backward is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::param::{ParamId, Parameter};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule: `(grad_out, inputs, output) -> per-input gradient`.
pub type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    frozen: RefCell<HashSet<ParamId>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    grads: RefCell<HashMap<usize, Vec<f64>>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            frozen: RefCell::new(HashSet::new()),
            bound: RefCell::new(HashMap::new()),
            grads: RefCell::new(HashMap::new()),
            backward_done: Cell::new(false),
        }
    }

    /// A tape that records no backward rules; for evaluation only.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters bound after this call enter the graph as constants.
    pub fn freeze(&self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.borrow_mut().extend(ids);
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient (when the tape records gradients).
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, self.grad_enabled)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Binds a parameter. Repeated binding returns the same leaf so
    /// gradients from every use accumulate into one slot.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if let Some(&id) = self.bound.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let trainable = self.grad_enabled && !self.frozen.borrow().contains(&p.id());
        let v = self.leaf(p.value.clone(), trainable);
        self.bound.borrow_mut().insert(p.id(), v.id);
        v
    }

    pub(crate) fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a new node. The output is checked for finiteness; the
    /// backward rule is dropped when no input needs a gradient.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[Var<'_>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| nodes[v.id].requires_grad);
        let (parents, backward) = if requires_grad {
            (inputs.iter().map(|v| v.id).collect(), Some(backward))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`, populating leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            pending[loss.id] = Some(vec![1.0]);
        }
        let mut leaves = HashMap::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let Some(rule) = &node.backward else {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                leaves.insert(i, g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let parent_grads = rule(&g, &inputs, &node.value);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut pending[p] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        *self.grads.borrow_mut() = leaves;
        self.backward_done.set(true);
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        self.grads
            .borrow()
            .get(&v.id)
            .map(|g| Tensor::from_parts(shape, g.clone()))
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor> {
        let leaf = *self.bound.borrow().get(&id)?;
        self.grad(Var {
            tape: self,
            id: leaf,
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn to_scalar(&self) -> Result<f64> {
        self.value().to_scalar()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
