//! Dense N-dimensional tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value: operations build new tensors and, when
//! any input tracks gradients, record the producing operation so that
//! [`Tensor::backward`] can propagate gradients to the leaves. Image-like data
//! uses the N×C×H×W layout throughout.

mod autograd;
pub mod gradcheck;
pub mod ops;

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use autograd::{corrupt_backward, corrupted_backward, OpKind};

/// Per-input gradients produced by a backward rule; `None` for inputs that
/// do not track gradients.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

/// Data available to a backward rule.
pub(crate) struct BackwardArgs<'a, T: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [T],
    /// The node's forward output.
    pub out: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> InputGrads<T>>;

pub(crate) struct Node<T: Scalar> {
    pub op: OpKind,
    pub inputs: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Dense tensor; cloning is cheap and shares the underlying buffer.
pub struct Tensor<T: Scalar = f32>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op));
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim("tensor", "shape", format!("extents must be positive, got {:?}", shape)));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(
            "tensor",
            "data",
            format!("shape {:?} holds {} elements but buffer has {}", shape, n, len),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node: None,
        }))
    }

    /// Constant leaf (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Gradient-tracked leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ONE)
    }

    /// Standard-normal samples from a seeded generator.
    pub fn randn(shape: &[usize], seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(StandardNormal.sample(&mut rng)))
            .collect();
        Self::new(shape, data)
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Builds the result of an operation. The producing-operation record is
    /// kept only when at least one input tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: OpKind,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = if requires_grad {
            Some(Node {
                op,
                inputs,
                backward,
            })
        } else {
            None
        };
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor has no producing-operation record.
    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op(&self) -> Option<OpKind> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Accumulated gradient, if any has been propagated to this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Constant copy sharing no graph with `self`.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Fresh gradient-tracked leaf with the same values.
    pub fn to_param(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Same values converted to another element type, as a constant leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.0.shape.clone(),
            self.0.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            false,
        )
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const u8 as usize
    }

    /// Backpropagates from a one-element loss, accumulating `∂loss/∂leaf`
    /// into every reachable gradient-tracked leaf.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }

    /// N×C×H×W extents, or a dimension error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(
                op,
                "rank",
                format!("expected N×C×H×W, got {:?}", self.shape()),
            )),
        }
    }
}
