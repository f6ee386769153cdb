//! Reverse-mode differentiation tape.
//!
//! Operations append nodes in evaluation order, which is already a
//! topological order of the computation DAG. `backward` walks the node
//! list in reverse, so every node is visited exactly once, children
//! before their parents, and gradients of shared subexpressions
//! accumulate by summation.
//!
//! A tape records one forward pass and supports one backward pass;
//! training loops create a fresh tape per step.

use std::cell::RefCell;
use std::rc::Rc;

use super::error::{NumericsError, Result};
use super::scalar::Scalar;
use super::tensor::{NodeRef, Tensor};

/// Gradient contributions for each recorded parent, in parent order.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Vec<T>>>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    /// Length of this node's value (and therefore of its gradient buffer).
    len: usize,
    /// None for leaves (watched tensors).
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Records operations for one forward pass.
#[derive(Clone)]
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers `t` as a differentiable leaf on this tape. The returned
    /// tensor shares the underlying buffer.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Vec::new(), t.len(), None);
        let mut out = t.detach();
        out.node = Some(NodeRef {
            tape: self.clone(),
            id,
        });
        out
    }

    pub(crate) fn push(
        &self,
        parents: Vec<usize>,
        len: usize,
        backward: Option<BackwardFn<T>>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "tape already consumed by backward");
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents,
            len,
            backward,
        });
        id
    }

    /// Propagates gradients from a scalar loss back to every watched leaf.
    /// Consumes the recorded nodes; further recording on this tape panics.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if !loss.is_scalar() {
            return Err(NumericsError::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                got: loss.shape().to_vec(),
            });
        }
        let loss_id = match &loss.node {
            Some(r) if self.same_tape(&r.tape) => r.id,
            Some(_) => return Err(NumericsError::TapeMismatch),
            None => {
                return Err(NumericsError::Config {
                    op: "backward",
                    msg: "loss does not participate in this tape".into(),
                })
            }
        };

        let nodes = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(NumericsError::TapeConsumed);
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![T::ONE]);

        for (id, node) in nodes.into_iter().enumerate().rev() {
            let Some(backward) = node.backward else {
                continue; // leaf: its accumulated gradient is the result
            };
            // Nodes off the path to the loss receive no gradient.
            let Some(g) = grads[id].take() else { continue };
            debug_assert_eq!(g.len(), node.len);
            let contributions = backward(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contributions) {
                match &mut grads[*pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), contrib.len());
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Result of a backward pass, queryable per watched tensor.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `t`, if `t` participated in
    /// the tape and lies on a path to the loss.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let node = t.node.as_ref()?;
        self.grads.get(node.id)?.as_deref()
    }

    /// Like `get`, but absent gradients read as zeros of the right length.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![T::ZERO; t.len()],
        }
    }
}

/// Resolves the common tape of an op's inputs, if any input is attached.
/// Inputs attached to two different tapes are an error.
pub(crate) fn merge_tape<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<Tape<T>> = None;
    for t in inputs {
        if let Some(r) = &t.node {
            match &found {
                None => found = Some(r.tape.clone()),
                Some(existing) if existing.same_tape(&r.tape) => {}
                Some(_) => return Err(NumericsError::TapeMismatch),
            }
        }
    }
    Ok(found)
}

/// Node id of `t` on `tape`, if attached there.
pub(crate) fn node_id_on<T: Scalar>(t: &Tensor<T>, tape: &Tape<T>) -> Option<usize> {
    t.node
        .as_ref()
        .filter(|r| tape.same_tape(&r.tape))
        .map(|r| r.id)
}

/// Attaches an op output to the tape.
pub(crate) fn attach<T: Scalar>(mut out: Tensor<T>, tape: &Tape<T>, id: usize) -> Tensor<T> {
    out.node = Some(NodeRef {
        tape: tape.clone(),
        id,
    });
    out
}
