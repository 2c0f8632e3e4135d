//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every leaf that was registered as trainable.
//! The gradient contract is validated against central finite differences
//! in [`gradcheck`].

pub mod gradcheck;
pub mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

impl<E: Scalar> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

/// Backward closure: (grad_out, out_value, parent_values) -> parent grads.
type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &Tensor<E>, &[Tensor<E>]) -> Vec<Tensor<E>>>;

struct Node<E: Scalar> {
    value: Tensor<E>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<E>>,
    needs_grad: bool,
}

/// Recorded computation over tensors.
///
/// One graph per forward pass; models thread `&Graph` through their
/// forward methods and register their parameters with [`Graph::param`].
pub struct Graph<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    param_ids: RefCell<BTreeMap<String, NodeId>>,
    recording: bool,
}

impl<E: Scalar> Graph<E> {
    /// Graph that records backward closures (training mode).
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_ids: RefCell::new(BTreeMap::new()),
            recording: true,
        }
    }

    /// Forward-only graph; `backward` on it is rejected.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_ids: RefCell::new(BTreeMap::new()),
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

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Anonymous differentiable leaf (used by tests and input-grad paths).
    pub fn var(&self, value: Tensor<E>) -> NodeId {
        self.push_leaf(value, self.recording)
    }

    /// Register a parameter leaf. Repeated calls with the same name return
    /// the same node, so a parameter used twice accumulates one gradient.
    /// Registering a *different* tensor under an existing name is a
    /// programming error (two models sharing one graph) and panics.
    pub fn param(&self, p: &Param<E>) -> NodeId {
        if let Some(&id) = self.param_ids.borrow().get(&p.name) {
            assert!(
                self.nodes.borrow()[id.0].value.ptr_eq(&p.value),
                "parameter `{}` re-registered with a different tensor; \
                 one graph serves one model instance",
                p.name
            );
            return id;
        }
        let id = self.push_leaf(p.value.clone(), p.trainable && self.recording);
        self.param_ids.borrow_mut().insert(p.name.clone(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> Tensor<E> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn push_leaf(&self, value: Tensor<E>, needs_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        NodeId(nodes.len() - 1)
    }

    /// Record an operation node. The backward closure is dropped when the
    /// graph is in forward-only mode or no parent needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<E>,
        parents: Vec<NodeId>,
        backward: BackwardFn<E>,
    ) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.recording && parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        NodeId(nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Rejects non-scalar losses and graphs built in forward-only mode.
    /// Intermediate gradients are freed as soon as they are consumed;
    /// use [`Graph::backward_retaining`] to keep them for inspection.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>, TensorError> {
        self.backward_impl(loss, false)
    }

    /// Like [`Graph::backward`] but keeps the gradient of every node.
    pub fn backward_retaining(&self, loss: NodeId) -> Result<Gradients<E>, TensorError> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&self, loss: NodeId, retain: bool) -> Result<Gradients<E>, TensorError> {
        if !self.recording {
            return Err(TensorError::Gradient(
                "backward on an unrecorded (no-grad) computation".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(TensorError::Gradient("unknown loss node".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), E::one()));
        for id in (0..=loss.0).rev() {
            let grad_out = if retain {
                match grads[id].clone() {
                    Some(gr) => gr,
                    None => continue,
                }
            } else {
                match grads[id].take() {
                    Some(gr) => gr,
                    None => continue,
                }
            };
            let node = &nodes[id];
            if node.backward.is_none() {
                // Leaf: keep the accumulated gradient.
                grads[id] = Some(grad_out);
                continue;
            }
            let parent_values: Vec<Tensor<E>> =
                node.parents.iter().map(|p| nodes[p.0].value.clone()).collect();
            let back = node.backward.as_ref().unwrap();
            let parent_grads = back(&grad_out, &node.value, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[pid.0].value.shape(),
                    "gradient shape mismatch for parent {}",
                    pid.0
                );
                match &mut grads[pid.0] {
                    Some(acc) => {
                        let data = acc.data_mut();
                        for (a, b) in data.iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            node_grads: grads,
            param_ids: self.param_ids.borrow().clone(),
        })
    }
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<E: Scalar> {
    node_grads: Vec<Option<Tensor<E>>>,
    param_ids: BTreeMap<String, NodeId>,
}

impl<E: Scalar> Gradients<E> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.param_ids.get(name).and_then(|id| self.node(*id))
    }

    /// Parameter names that received a gradient, in name order.
    pub fn param_names(&self) -> Vec<&str> {
        self.param_ids
            .iter()
            .filter(|(_, id)| self.node(**id).is_some())
            .map(|(name, _)| name.as_str())
            .collect()
    }
}

/// Validate that parameter names are unique, per the model contract.
pub fn check_unique_names<E: Scalar>(params: &[&Param<E>]) -> Result<(), TensorError> {
    let mut seen = std::collections::BTreeSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                p.name
            )));
        }
    }
    Ok(())
}
