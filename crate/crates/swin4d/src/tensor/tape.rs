use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Gradient rule of a recorded op: maps the output gradient to one gradient
/// per parent, in parent order.
pub(crate) type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

pub(crate) struct Node<T: Elem> {
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<BackFn<T>>,
}

/// Define-by-run recording of a differentiable computation.
///
/// Ops are pushed in execution order, so the node list is already
/// topologically sorted; a single reverse sweep in [`Tape::backward`] visits
/// each node exactly once. A tape built with [`Tape::inference`] evaluates the
/// same ops without recording anything, which keeps large forward passes from
/// retaining intermediates.
pub struct Tape<T: Elem> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

/// Handle to a value on a tape. Carries the forward value; the id ties it to
/// the tape's node list when recording.
#[derive(Clone)]
pub struct Var<T: Elem> {
    pub(crate) id: usize,
    value: Tensor<T>,
}

impl<T: Elem> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

impl<T: Elem> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    /// Recording tape; supports backward.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Non-recording tape: same ops, no graph, no backward.
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

    /// Insert a tensor as a tracked leaf.
    pub fn watch(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
    ) -> Var<T> {
        debug_assert!(
            value.all_finite(),
            "non-finite values produced on tape (shape {:?})",
            value.shape()
        );
        if !self.recording {
            return Var {
                id: usize::MAX,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, backward });
        Var { id, value }
    }

    /// Reverse sweep from a scalar loss. Every tracked variable reachable from
    /// the loss receives `d loss / d var`; fan-out accumulates additively.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        if !loss.value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            let Some(back) = &node.backward else {
                continue; // leaf
            };
            let parent_grads = back(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, g) in node.parents.iter().zip(parent_grads) {
                match &grads[*pid] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), g.shape());
                        let sum: Vec<T> = existing
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(a, b)| *a + *b)
                            .collect();
                        grads[*pid] = Some(Tensor::from_parts(g.shape().to_vec(), sum));
                    }
                    None => grads[*pid] = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-variable gradients produced by one backward sweep.
pub struct Gradients<T: Elem> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Gradients[{}]", self.grads.len())
    }
}

impl<T: Elem> Gradients<T> {
    /// Gradient with respect to `var`, if it was reachable from the loss.
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient or a zero tensor of the variable's shape.
    pub fn wrt_or_zero(&self, var: &Var<T>) -> Tensor<T> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
