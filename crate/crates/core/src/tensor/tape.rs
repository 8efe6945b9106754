use std::cell::RefCell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F], &mut GradStore<F>)>;

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for backpropagation. A tape created
/// with [`Tape::inference`] evaluates the same ops without recording any
/// backward closures.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    recording: bool,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, F> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F> Copy for Var<'_, F> {}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradient accumulators used during a backward sweep.
pub(crate) struct GradStore<F> {
    lens: Vec<usize>,
    wants: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> GradStore<F> {
    /// Runs `f` on the accumulator of node `id`, allocating it on first use.
    /// Nodes that do not require gradients are skipped.
    pub(crate) fn acc(&mut self, id: usize, f: impl FnOnce(&mut [F])) {
        if !self.wants[id] {
            return;
        }
        let len = self.lens[id];
        let slot = self.grads[id].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients<F> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `var`; `None` if it does not participate in the loss or
    /// does not require gradients.
    pub fn get(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient for `var`, zeros when it was not reached.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Tape that evaluates without recording gradients.
    pub fn inference() -> Self {
        Self {
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
        self.nodes.borrow().is_empty()
    }

    /// Trainable input: receives a gradient in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        let requires_grad = self.recording;
        self.push_node(value, requires_grad, None)
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_node(value, false, None)
    }

    fn push_node(
        &self,
        value: Tensor<F>,
        requires_grad: bool,
        backward: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records the result of an op. `make_backward` is only invoked when
    /// the tape records and at least one parent requires a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: &[usize],
        make_backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Var<'_, F> {
        let needs = self.recording && parents.iter().any(|&p| self.requires_grad(p));
        let backward = needs.then(make_backward);
        self.push_node(value, needs, backward)
    }

    pub fn value(&self, var: Var<'_, F>) -> Tensor<F> {
        self.nodes.borrow()[var.id].value.clone()
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", root.value.shape(), &[]));
        }
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let wants: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut store = GradStore {
            lens,
            wants,
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        store.acc(loss.id, |g| g[0] = F::one());
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            backward(&grad, &mut store);
            store.grads[id] = Some(grad);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads: store.grads,
        })
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn value(&self) -> Tensor<F> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }
}
