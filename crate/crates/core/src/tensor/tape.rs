//! Gradient tape for reverse-mode differentiation.
//!
//! A fresh tape is created per training step; the two forward passes of a
//! restricted-input step both attach to the same tape so a single backward
//! covers the combined loss. Nodes are appended in topological order
//! (parents always precede children), and backward sweeps the node list
//! once in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shared gradient accumulator of a parameter leaf.
pub(crate) type GradSink<E> = Rc<RefCell<Vec<E>>>;

pub(crate) enum NodeKind<E: Scalar> {
    /// Parameter leaf: backward adds the incoming gradient to the sink.
    Leaf(GradSink<E>),
    /// Interior op: maps the output gradient to one gradient buffer per
    /// parent, in `parents` order.
    Op(Box<dyn Fn(&[E]) -> Vec<Vec<E>>>),
}

pub(crate) struct Node<E: Scalar> {
    pub parents: Vec<usize>,
    pub numel: usize,
    pub kind: NodeKind<E>,
}

/// Append-only operation record; cheaply cloneable handle.
pub struct Tape<E: Scalar> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    pub(crate) fn push_leaf(&self, numel: usize, sink: GradSink<E>) -> usize {
        self.push(Node {
            parents: Vec::new(),
            numel,
            kind: NodeKind::Leaf(sink),
        })
    }

    pub(crate) fn push_op(
        &self,
        parents: Vec<usize>,
        numel: usize,
        backward: Box<dyn Fn(&[E]) -> Vec<Vec<E>>>,
    ) -> usize {
        debug_assert!({
            let n = self.len();
            parents.iter().all(|&p| p < n)
        });
        self.push(Node {
            parents,
            numel,
            kind: NodeKind::Op(backward),
        })
    }

    fn push(&self, node: Node<E>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }
}

/// Statistics from a backward sweep (used by the tape-traversal asserts).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes that received a gradient; each is processed exactly once.
    pub nodes_visited: usize,
    /// Total nodes on the tape at backward time.
    pub tape_len: usize,
}

/// Reverse sweep from a scalar loss, accumulating into every reachable
/// parameter leaf's gradient buffer.
pub fn backward<E: Scalar>(loss: &Tensor<E>) -> Result<BackwardReport> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let (tape, root) = loss
        .node()
        .ok_or_else(|| Error::Contract("backward on a tensor that is not on the tape".into()))?;

    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<Vec<E>>> = Vec::new();
    grads.resize_with(root + 1, || None);
    grads[root] = Some(vec![E::ONE]);

    let mut visited = 0usize;
    for i in (0..=root).rev() {
        let Some(grad) = grads[i].take() else {
            continue;
        };
        visited += 1;
        let node = &nodes[i];
        debug_assert_eq!(grad.len(), node.numel);
        match &node.kind {
            NodeKind::Leaf(sink) => {
                let mut acc = sink.borrow_mut();
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += *g;
                }
            }
            NodeKind::Op(f) => {
                let parent_grads = f(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.len(), nodes[p].numel);
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&pg) {
                                *a += *g;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
    }

    Ok(BackwardReport {
        nodes_visited: visited,
        tape_len: nodes.len(),
    })
}
