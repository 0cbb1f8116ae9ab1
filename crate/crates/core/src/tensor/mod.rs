//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to shape + row-major data plus an
//! optional gradient buffer. Operations live on [`Tape`]; when a tape is
//! recording and an input requires gradients, the op pushes a backward rule so
//! that [`Tape::backward`] can later fill gradient buffers for every tensor on
//! the loss's ancestry.

mod container;
mod init;
mod optim;
mod params;
mod tape;

pub use container::{load_container, save_container, Container, ContainerError, NamedTensor};
pub use init::{init_param, InitScheme};
pub use optim::Adam;
pub use params::ParamRegistry;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of bounds for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    shape: Vec<usize>,
    requires_grad: Cell<bool>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to a dense f64 array. Clones share storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                requires_grad: Cell::new(false),
                data: RefCell::new(data),
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(Vec::new(), vec![v]).expect("scalar: consistent by construction")
    }

    /// Marks this tensor as a trainable leaf and returns it.
    pub fn with_grad(self) -> Tensor {
        self.inner.requires_grad.set(true);
        self
    }

    /// Toggles gradient tracking; frozen parameters record no tape entries
    /// and receive no gradient.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Column count for rank-2 tensors.
    pub fn cols(&self) -> usize {
        self.inner.shape[1]
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copies the data out. Hot paths inside the crate borrow instead.
    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replaces the stored values. Shape must be preserved.
    pub fn assign(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: self.shape(),
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// In-place update used by the optimizer.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Accumulates `delta` into the gradient buffer (allocating zeros first).
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        for g in buf.iter_mut() {
            *g += 1.0;
        }
    }

    /// True when two handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Bit-exact comparison of the stored values.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.inner.shape == other.inner.shape
            && self
                .data_ref()
                .iter()
                .zip(other.data_ref().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
