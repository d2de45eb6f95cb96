//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward operation on a [`Var`] appends a node to its [`Tape`]. The
//! tape is append-only, so node order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Gradients of nodes with
//! several consumers accumulate additively.
//!
//! ```
//! use forgetalk_core::autodiff::Tape;
//! use forgetalk_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod grad_check;
mod ops;

use std::cell::{Cell, Ref, RefCell};

pub use grad_check::{grad_check, rel_error, GradCheckReport, DEFAULT_STEP};
pub use ops::{sigmoid as sigmoid_scalar, LOG_EPS, NEG_MASK};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Record of the operations executed during one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: ops::Op,
    needs_grad: bool,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(value, ops::Op::Leaf, requires_grad)
    }

    /// A leaf that gradients flow to.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: ops::Op) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&self, value: Tensor, op: ops::Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar root.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(contract_err!("backward root belongs to another tape"));
        }
        if self.consumed.replace(true) {
            return Err(contract_err!("backward already ran on this tape"));
        }
        let nodes = self.nodes.borrow();
        let root_numel = nodes[root.id].value.numel();
        if root_numel != 1 {
            return Err(contract_err!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            ops::backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any reached it.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(v.shape(), g.clone()))
    }

    pub(crate) fn raw(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id)?.as_deref()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }
}
