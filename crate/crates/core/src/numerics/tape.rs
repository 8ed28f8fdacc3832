//! Reverse-mode differentiation over dense tensors.
//!
//! Every differentiable op applied to a [`Var`] that is attached to a [`Tape`]
//! appends a node holding its parents and a vector-Jacobian product closure.
//! Node ids grow monotonically, so walking ids in reverse visits every node
//! after all of its consumers. [`Tape::backward`] consumes the tape.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product: upstream gradient plus a per-parent "needed" mask.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Ordered record of executed ops. Cheap to clone (shared handle).
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor value, optionally tracked by a tape.
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: self.node.clone(),
        }
    }
}

/// Gradients of a scalar with respect to every leaf on a consumed tape.
pub struct Gradients<T> {
    tape: Rc<RefCell<TapeInner<T>>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Registers `value` as a leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let id = self.push(Vec::new(), None);
        Var {
            value: Rc::new(value),
            node: Some((self.clone(), id)),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<Option<usize>>, backward: Option<BackwardFn<T>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "recording on a consumed tape");
        inner.nodes.push(Node { parents, backward });
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Propagates d(loss)/d(node) back to every leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let (tape, root) = loss
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("backward on a detached value"))?;
        if !tape.same(self) {
            return Err(Error::contract("loss belongs to a different tape"));
        }
        if loss.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::contract("tape already consumed by a backward pass"));
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[*root] = Some(Tensor::ones(loss.value.shape()));
        for (id, node) in nodes.into_iter().enumerate().take(root + 1).rev() {
            let Some(backward) = node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needed: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&upstream, &needed);
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(g)) = (parent, g) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            tape: Rc::clone(&self.inner),
            grads,
        })
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, `None` if it is not a leaf of this tape or was unreachable.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let (tape, id) = var.node.as_ref()?;
        if !Rc::ptr_eq(&tape.inner, &self.tape) {
            return None;
        }
        self.grads.get(*id)?.as_ref()
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

impl<T: Real> Var<T> {
    /// Untracked value.
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// Records an op whose output is `value`. Untracked when no input is tracked.
    pub(crate) fn record(inputs: &[&Var<T>], value: Rc<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let tape = inputs.iter().find_map(|v| v.tape()).cloned();
        let Some(tape) = tape else {
            return Self { value, node: None };
        };
        let parents = inputs
            .iter()
            .map(|v| {
                v.node.as_ref().map(|(t, id)| {
                    assert!(t.same(&tape), "op mixes values from different tapes");
                    *id
                })
            })
            .collect();
        let id = tape.push(parents, Some(backward));
        Self {
            value,
            node: Some((tape, id)),
        }
    }
}
