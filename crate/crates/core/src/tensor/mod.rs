//! Dense f64 tensors with a recorded reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Tensors are
//! lightweight [`DiffTensor`] handles into that tape; operations append a node
//! and return a new handle. [`DiffTensor::backward`] replays the tape once in
//! reverse and consumes it.
//!
//! Elementwise binary ops broadcast numpy-style (axes aligned from the right,
//! each pair equal or one of them 1). Reductions keep the reduced axis with
//! length 1 so results broadcast back against their source.
//!
//! `log`, `sqrt` and `div` reject inputs outside their domain instead of
//! producing infinities or NaNs.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_grad, max_rel_error};

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    SumAxis(usize),
    SumAll(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MaskedFill(usize, Vec<bool>),
    Concat(Vec<usize>),
    SliceRows(usize, usize),
    SelectRows(usize, Vec<usize>),
    /// Scalar output whose gradient with respect to the input was computed
    /// during the forward pass (used by the CTC loss).
    FixedGrad(usize, Vec<f64>),
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) tracked: bool,
    pub(crate) op: Op,
}

/// Ordered record of the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct DiffTensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for DiffTensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 || numel(shape) != len {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Leaf tensor whose gradient is accumulated by `backward`.
    pub fn param(&self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor<'_>> {
        check_shape("param", shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, true, Op::Leaf))
    }

    /// Untracked leaf.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor<'_>> {
        check_shape("constant", shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<DiffTensor<'_>> {
        self.constant(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(&self, value: f64) -> DiffTensor<'_> {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    /// Re-wraps a node id obtained from [`DiffTensor::id`].
    pub fn handle(&self, id: usize) -> DiffTensor<'_> {
        assert!(id < self.len(), "node {id} not on this tape");
        DiffTensor { tape: self, id }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, tracked: bool, op: Op) -> DiffTensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            grad: None,
            tracked,
            op,
        });
        DiffTensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        if !root.tracked {
            return Err(Error::Untracked);
        }
        self.consumed.set(true);
        nodes[loss].grad = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            let (lower, upper) = nodes.split_at_mut(i);
            let node = &mut upper[0];
            if !node.tracked {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            ops::propagate(node, g, lower);
        }
        Ok(())
    }
}

impl<'t> DiffTensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    pub fn values(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    /// Accumulated gradient, present after `backward` for tracked ancestors of the loss.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Untracked copy; gradients stop here.
    pub fn detach(&self) -> DiffTensor<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, false, Op::Leaf)
    }

    /// Reverse pass from this scalar. Consumes the tape.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }
}
