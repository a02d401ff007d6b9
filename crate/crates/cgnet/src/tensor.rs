//! Dense NCHW tensors backing a dynamic reverse-mode autodiff graph.
//!
//! A `Tensor` is a cheaply clonable handle (`Rc`) onto an immutable value
//! buffer plus the op that produced it. Ops build a fresh graph on every
//! forward pass; `backward` walks it in reverse topological order. Values
//! never change after creation except through the two sanctioned paths:
//! gradient buffers and optimizer updates of leaf parameters.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;

use crate::autograd::Op;
use crate::error::{Error, Result};

/// Element type of a tensor. Training and inference run in `f32`;
/// the finite-difference oracle and gradcheck run in `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// Gaussian CDF via the error function, evaluated in double precision.
    fn gauss_cdf(self) -> Self {
        let x = self.into_f64();
        Self::from_f64(0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
    }

    /// Gaussian PDF, evaluated in double precision.
    fn gauss_pdf(self) -> Self {
        let x = self.into_f64();
        Self::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// N x C x H x W extents of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

static NEXT_TENSOR_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording the autodiff graph (inference mode).
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) struct TensorInner<T: Scalar> {
    pub(crate) id: usize,
    pub(crate) shape: Shape,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) op: Op<T>,
}

pub struct Tensor<T: Scalar> {
    pub(crate) inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(shape: Shape, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor that does not track gradients (inputs, targets).
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} != numel of {}", data.len(), shape),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Self::new_inner(shape, data, false, Op::Leaf))
    }

    /// Leaf tensor that accumulates gradients (trainable parameter).
    pub fn param(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "param",
                format!("data length {} != numel of {}", data.len(), shape),
            ));
        }
        check_finite("param", &data)?;
        Ok(Self::new_inner(shape, data, true, Op::Leaf))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new_inner(shape, vec![T::zero(); shape.numel()], false, Op::Leaf)
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self::new_inner(shape, vec![v; shape.numel()], false, Op::Leaf)
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    /// Internal constructor for op outputs: validates finiteness and keeps the
    /// graph edge only when some input tracks gradients and grad mode is on.
    pub(crate) fn from_op(shape: Shape, data: Vec<T>, op: Op<T>, name: &'static str) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.numel());
        check_finite(name, &data)?;
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        let op = if track { op } else { Op::Leaf };
        Ok(Self::new_inner(shape, data, track, op))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    /// Replace the value buffer in place. Sanctioned mutation path for
    /// optimizer updates and the finite-difference oracle.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("data length {} != numel of {}", data.len(), self.shape()),
            ));
        }
        check_finite("set_data", &data)?;
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Leaf copy of the values, detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.shape(), self.data().clone(), false, Op::Leaf)
    }

    /// Element accessor, mostly for tests and small utilities.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let idx = self.shape().index(n, c, h, w);
        self.data()[idx]
    }

    pub fn scalar_value(&self) -> Result<T> {
        if !self.shape().is_scalar() {
            return Err(Error::NonScalar {
                op: "scalar_value",
                shape: self.shape().to_string(),
            });
        }
        Ok(self.data()[0])
    }

    /// Convert the element type; produces a detached leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64(v.into_f64()))
            .collect();
        Tensor::<U>::new_inner(self.shape(), data, false, Op::Leaf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        let s = Shape::new(1, 1, 2, 2);
        assert!(Tensor::from_vec(s, vec![1.0f32; 4]).is_ok());
        assert!(Tensor::from_vec(s, vec![1.0f32; 3]).is_err());
        assert!(Tensor::from_vec(s, vec![1.0, f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), s.numel() - 1);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f64>::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = with_no_grad(|| crate::ops::add(&x, &x).unwrap());
        assert!(!y.requires_grad());
    }
}
