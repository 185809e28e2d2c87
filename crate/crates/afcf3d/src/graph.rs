//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to a [`Graph`]; each node stores its forward value
//! and a closure producing gradients for its parents. A forward/backward pass
//! over one graph is single-threaded with respect to graph mutation; kernels
//! may parallelize internally over disjoint output regions.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor5};

pub type NodeId = usize;

type BackwardFn<E> = Box<dyn Fn(&Tensor5<E>) -> Vec<Option<Tensor5<E>>>>;

struct Node<E: Element> {
    value: Tensor5<E>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<E>>,
    needs_grad: bool,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    /// Train-mode forward (affects normalization statistics).
    pub training: bool,
    /// Verify that every produced value is finite.
    pub checked: bool,
    flops: u64,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<E: Element> Graph<E> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            checked: false,
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor5<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor5<E>) -> NodeId {
        self.leaf(value, false)
    }

    /// Append an operation result. The backward closure receives the gradient
    /// of the loss w.r.t. this node and returns gradients aligned with
    /// `parents` (None for inputs that need none).
    pub(crate) fn push(
        &mut self,
        value: Tensor5<E>,
        parents: Vec<NodeId>,
        backward: BackwardFn<E>,
    ) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite value produced at node {} with shape {:?}",
                self.nodes.len(),
                value.shape
            )));
        }
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor5<E> {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn add_flops(&mut self, f: u64) {
        self.flops += f;
    }

    /// Total estimated floating-point operations recorded during forward
    /// (one multiply-accumulate counted as 2).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Reverse pass from a scalar `loss` node. Returns per-node gradients;
    /// entries are `None` for nodes the loss does not depend on (or that need
    /// no gradient).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::config("backward requires a scalar loss node"));
        }
        let mut grads: Vec<Option<Tensor5<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor5::scalar(E::one()));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pi, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[*pi].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape, self.nodes[*pi].value.shape);
                    accumulate(&mut grads[*pi], pg);
                }
            }
            // Keep gradients only for leaves that asked for them.
            if node.backward.is_none() && node.needs_grad {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor5<E>>, g: Tensor5<E>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape, g.shape);
            let sum: Vec<E> = acc
                .data()
                .iter()
                .zip(g.data())
                .map(|(&a, &b)| a + b)
                .collect();
            *slot = Some(Tensor5::new(g.shape, sum));
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor5<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor5<E>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
