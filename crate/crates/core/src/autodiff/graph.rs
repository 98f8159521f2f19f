//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every tensor produced during a forward pass as a node
//! holding its value, its parent indices and a backward closure. Gradients
//! flow in reverse insertion order, which is always a valid reverse
//! topological order, and are accumulated deterministically.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::store::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(pub(crate) usize);

/// Everything a backward closure may inspect.
pub struct BackArgs<'a, S: Scalar> {
    /// Values of the node's parents, in slot order.
    pub parents: &'a [&'a ArrayD<S>],
    /// The node's own forward value.
    pub value: &'a ArrayD<S>,
    /// Incoming gradient with the node's shape.
    pub grad: &'a ArrayD<S>,
}

/// Returns `(parent_slot, gradient_contribution)` pairs.
pub(crate) type BackFn<S> = Box<dyn Fn(&BackArgs<'_, S>) -> Vec<(usize, ArrayD<S>)>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<usize>,
    back: Option<BackFn<S>>,
    needs_grad: bool,
}

/// One forward pass worth of computation.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound_params: BTreeMap<usize, T>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound_params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<S>) -> T {
        self.push_leaf(value, false)
    }

    /// A leaf that accumulates gradients (inputs under test, probes).
    pub fn var(&mut self, value: ArrayD<S>) -> T {
        self.push_leaf(value, true)
    }

    /// Binds a stored parameter into the graph. Repeated binds of the same
    /// parameter return the same node so its gradient accumulates in one
    /// place. Non-trainable parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> T {
        if let Some(&t) = self.bound_params.get(&id.0) {
            return t;
        }
        let t = self.push_leaf(store.value(id).clone(), store.trainable(id));
        self.bound_params.insert(id.0, t);
        t
    }

    fn push_leaf(&mut self, value: ArrayD<S>, needs_grad: bool) -> T {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, parents: Vec::new(), back: None, needs_grad });
        T(idx)
    }

    /// Records an interior node. The backward closure is dropped when no
    /// parent can use a gradient.
    pub(crate) fn push(&mut self, value: ArrayD<S>, parents: Vec<usize>, back: BackFn<S>) -> T {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            back: needs_grad.then_some(back),
            needs_grad,
        });
        T(idx)
    }

    pub fn value(&self, t: T) -> &ArrayD<S> {
        &self.nodes[t.0].value
    }

    /// Forward value of a node that must be scalar (one element).
    pub fn scalar_value(&self, t: T) -> S {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.len(), 1, "node is not scalar, shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, t: T) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Reverse pass from a scalar loss. Interior gradients are consumed as
    /// soon as they are propagated; leaf gradients survive in the result.
    pub fn backward(&self, loss: T) -> Grads<S> {
        let mut g: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_node = &self.nodes[loss.0];
        assert_eq!(loss_node.value.len(), 1, "backward needs a scalar loss");
        g[loss.0] = Some(ArrayD::ones(loss_node.value.raw_dim()));

        for i in (0..=loss.0).rev() {
            if g[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let grad = g[i].take().expect("checked above");
            let parent_vals: Vec<&ArrayD<S>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let args = BackArgs { parents: &parent_vals, value: &node.value, grad: &grad };
            for (slot, contrib) in back(&args) {
                let p = node.parents[slot];
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch into parent slot {slot}"
                );
                match g[p].as_mut() {
                    Some(acc) => *acc += &contrib,
                    None => g[p] = Some(contrib),
                }
            }
        }
        Grads { by_node: g }
    }

    /// Moves parameter gradients out of `grads`, aligned with the store's
    /// registration order. Parameters that were never bound, are frozen, or
    /// received no gradient yield `None`.
    pub fn take_param_grads(&self, store: &ParamStore<S>, grads: &mut Grads<S>) -> Vec<Option<ArrayD<S>>> {
        let mut out: Vec<Option<ArrayD<S>>> = (0..store.len()).map(|_| None).collect();
        for (&pidx, &t) in &self.bound_params {
            out[pidx] = grads.by_node[t.0].take();
        }
        out
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S: Scalar> {
    by_node: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to a leaf node, if any reached it.
    pub fn of(&self, t: T) -> Option<&ArrayD<S>> {
        self.by_node[t.0].as_ref()
    }
}
