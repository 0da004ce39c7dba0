//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record the producing [`Op`] together with
//! handles to their parents, so the graph is implicitly a DAG rooted at the
//! most recent result. [`Tensor::backward`] walks that DAG once in reverse
//! topological order and deposits `d(loss)/d(leaf)` in every leaf's grad slot.
//!
//! Only the grad slot is mutable after construction. Parameter updates build
//! new leaf tensors instead of writing through shared handles.

mod autograd;
mod conv;
mod gradcheck;
mod ops;
pub mod scdt;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub use autograd::Gradients;
pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckReport};

pub(crate) use autograd::Op;

use crate::error::{Error, Result};

/// Element type of a tensor: `f64` for oracle and gradient tests, `f32` for training.
pub trait Float:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + Default + Sum + AddAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) struct Node<T: Float> {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<T>>>,
    pub(crate) op: Option<Op<T>>,
    pub(crate) consumed: AtomicBool,
}

/// Shared handle to an immutable tensor node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor<T: Float> {
    pub(crate) node: Arc<Node<T>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.op.as_ref().map(|op| op.name()))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
                consumed: AtomicBool::new(false),
            }),
        }
    }

    /// Creates a constant tensor. Fails when `data.len()` disagrees with the shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Creates a leaf that receives gradients during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        if op.parents().iter().any(|p| p.requires_grad()) {
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Returns a fresh gradient-tracking leaf holding a copy of this tensor's values.
    pub fn with_grad(&self) -> Self {
        Self::build(self.node.shape.clone(), self.node.data.clone(), true, None)
    }

    /// Returns a constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    /// Converts element precision. The result is a constant.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::build(
            self.node.shape.clone(),
            self.node.data.iter().map(|v| U::of(v.as_f64())).collect(),
            false,
            None,
        )
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Name of the operation that produced this tensor, if it is recorded on the tape.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.op.as_ref().map(|op| op.name())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}
