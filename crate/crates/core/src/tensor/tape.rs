use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Maps the adjoint of an op's output to one optional adjoint per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed ops. Node ids are assigned in execution order,
/// so reverse id order is a valid reverse topological order.
///
/// A tape is confined to one thread and is meant to live for a single
/// forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records the result of an op. `backward` receives the output adjoint and
    /// must return one entry per parent, in order; `None` means no gradient
    /// flows to that parent. The closure is dropped when no parent needs it.
    pub fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "var from another tape");
                nodes[p.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            grad: None,
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient and
    /// adds it to the node's accumulated gradient.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let mut adjoints: Vec<Option<Tensor<T>>> = {
            let nodes = self.nodes.borrow();
            let value = &nodes[root.id].value;
            if value.numel() != 1 {
                return Err(Error::Usage(format!(
                    "backward needs a scalar root, got shape {:?}",
                    value.shape()
                )));
            }
            let mut adj: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
            if nodes[root.id].requires_grad {
                adj[root.id] = Some(Tensor::ones(value.shape().to_vec()));
            }
            adj
        };

        {
            let nodes = self.nodes.borrow();
            for id in (0..=root.id).rev() {
                let Some(adjoint) = adjoints[id].as_ref() else {
                    continue;
                };
                let node = &nodes[id];
                let Some(backward) = node.backward.as_ref() else {
                    continue;
                };
                let parent_grads = backward(adjoint);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[pid].value.shape());
                    match adjoints[pid].as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => adjoints[pid] = Some(g),
                    }
                }
            }
        }

        let mut nodes = self.nodes.borrow_mut();
        for (id, adjoint) in adjoints.into_iter().enumerate() {
            let Some(adjoint) = adjoint else { continue };
            match nodes[id].grad.as_mut() {
                Some(g) => g.add_assign(&adjoint),
                None => nodes[id].grad = Some(adjoint),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient; `None` before any backward pass reaches this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
