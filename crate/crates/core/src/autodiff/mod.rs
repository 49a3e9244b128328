//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation executed on it in order. Values live on
//! the tape; callers hold lightweight [`Var`] handles. [`Tape::backward`] walks
//! the record once in reverse and leaves `d root / d leaf` on every leaf that
//! was created with `requires_grad`.
//!
//! One training step owns one tape. Gradients of intermediate nodes are
//! released as soon as they have been propagated, so only leaf gradients can
//! be read back.

pub(crate) mod kernels;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

pub use ops::Padding;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Backward rule of a [`Tape::custom`] node: maps the upstream gradient to one
/// optional gradient per input (`None` means "no contribution").
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceLast {
        input: usize,
        axis: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: kernels::PlaneGeom,
    },
    Depthwise {
        input: usize,
        weight: usize,
        kt: usize,
        geom: kernels::PlaneGeom,
    },
    Pointwise {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    Custom {
        inputs: Vec<usize>,
        backward: BackwardFn<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Records a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record; previously issued handles become detached.
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>, TensorError> {
        let index = self.check(var)?;
        Ok(&self.nodes[index].value)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize], TensorError> {
        self.value(var).map(Tensor::shape)
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Result<Option<&[T]>, TensorError> {
        let index = self.check(var)?;
        Ok(self.grads[index].as_deref())
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool, TensorError> {
        let index = self.check(var)?;
        Ok(self.nodes[index].requires_grad)
    }

    pub(crate) fn check(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::DetachedVar { index: var.index });
        }
        Ok(var.index)
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: op_name, index });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a node whose value and backward rule are supplied by the caller.
    pub fn custom(
        &mut self,
        op_name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var, TensorError> {
        let inputs = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        self.push(
            op_name,
            value,
            Op::Custom {
                inputs: inputs.clone(),
                backward,
            },
            &inputs,
        )
    }

    /// Propagates `d root / d ·` to every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root = self.check(root)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[root].value.shape();
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.grads[root] = Some(vec![T::one()]);
        for index in (0..=root).rev() {
            if matches!(self.nodes[index].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.grads[index].take() else { continue };
            self.propagate(index, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, index: usize, contribution: Vec<T>) {
        if !self.nodes[index].requires_grad {
            return;
        }
        match &mut self.grads[index] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }
}
