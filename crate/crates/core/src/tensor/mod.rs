//! Minimal reverse-mode automatic differentiation.
//!
//! Tensors are dense f32 buffers; every reduction accumulates in f64. Ops
//! are methods on a [`Tape`], which records a backward closure whenever an
//! input requires gradients. [`Tape::backward`] walks the records in reverse
//! exactly once and clears them, so a second call without a fresh forward
//! pass is an error. Ops validate shapes and reject non-finite outputs.

mod adam;
mod checkpoint;
pub mod init;
mod ops;

pub use adam::{clip_grad_norm, global_grad_norm, AdamState, Params};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    NonFinite {
        op: &'static str,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    EmptyTape,
    BadIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonFinite { op } => write!(f, "non-finite output in {op}"),
            TensorError::NotScalar { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            TensorError::EmptyTape => write!(f, "backward called on an empty tape"),
            TensorError::BadIndex { op, index, bound } => {
                write!(f, "index {index} out of bounds {bound} in {op}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
}

/// A shared handle to a dense f32 buffer, cheap to clone.
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(TensorInner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
        }))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Self {
        Tensor::new(shape.to_vec(), data, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(shape: &[usize], data: Vec<f32>) -> Self {
        Tensor::new(shape.to_vec(), data, false)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Overwrite the buffer in place (optimizer updates).
    pub fn set_data(&self, values: &[f32]) {
        let mut data = self.0.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(grad) => {
                for (g, d) in grad.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

type BackwardFn = Box<dyn FnMut()>;

/// Records forward ops and replays their adjoints in reverse.
pub struct Tape {
    records: RefCell<Vec<BackwardFn>>,
    enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: Cell::new(true),
        }
    }

    /// A tape that never records; forward passes only.
    pub fn inference() -> Self {
        let tape = Tape::new();
        tape.enabled.set(false);
        tape
    }

    pub fn set_grad_enabled(&self, enabled: bool) {
        self.enabled.set(enabled);
    }

    pub fn grad_enabled(&self) -> bool {
        self.enabled.get()
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn clear(&self) {
        self.records.borrow_mut().clear();
    }

    fn record(&self, f: BackwardFn) {
        self.records.borrow_mut().push(f);
    }

    fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.enabled.get() && inputs.iter().any(|t| t.requires_grad())
    }

    /// Backpropagate from a scalar loss through every recorded op, then
    /// clear the tape.
    pub fn backward(&self, loss: &Tensor) -> TensorResult<()> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let mut records = self.records.borrow_mut();
        if records.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        loss.accumulate_grad(&[1.0]);
        for mut record in records.drain(..).rev() {
            record();
        }
        Ok(())
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> TensorResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}
