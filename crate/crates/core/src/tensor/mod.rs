//! Dense row-major tensors with a reverse-mode tape.
//!
//! A [`Tensor`] is an immutable value with shared storage. Operations that go
//! through a [`Tape`] record a backward rule whenever gradient recording is
//! enabled and at least one operand requires a gradient; everything else is a
//! plain computation.

pub mod kernels;
pub mod memory;
mod tape;

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tape::{QuantizerGrad, Tape};

/// Element precision of tensors produced by a tape.
///
/// Storage is always `f64`; `F32` rounds every produced value through `f32`
/// and accounts four bytes per element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn elem_bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    pub(crate) fn round_all(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Counted element buffer.
pub(crate) struct Storage {
    data: Vec<f64>,
    bytes: usize,
}

impl Storage {
    pub(crate) fn new(data: Vec<f64>, precision: Precision) -> Self {
        let bytes = data.len() * precision.elem_bytes();
        memory::track_alloc(bytes);
        Storage { data, bytes }
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Clone for Storage {
    fn clone(&self) -> Self {
        memory::track_alloc(self.bytes);
        Storage {
            data: self.data.clone(),
            bytes: self.bytes,
        }
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        memory::track_free(self.bytes);
    }
}

pub(crate) type GradCell = Arc<Mutex<Option<Storage>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Arc<Storage>,
    precision: Precision,
    requires_grad: bool,
    node: Option<NodeRef>,
    grad: Option<GradCell>,
}

impl Tensor {
    /// Creates a constant tensor. Fails when `shape` does not describe
    /// `data.len()` elements or has a zero extent.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, Precision::F64))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data, precision)),
            precision,
            requires_grad: false,
            node: None,
            grad: None,
        }
    }

    /// A trainable leaf: requires a gradient and owns a gradient buffer that
    /// accumulates across backward passes until [`Tensor::zero_grad`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(Arc::new(Mutex::new(None)));
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], Precision::F64)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        self.storage.data()
    }

    pub fn numel(&self) -> usize {
        self.storage.data().len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on a tensor of shape {:?}",
            self.shape
        );
        self.data()[0]
    }

    /// Value-identical copy with no gradient linkage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            storage: Arc::clone(&self.storage),
            precision: self.precision,
            requires_grad: false,
            node: None,
            grad: None,
        }
    }

    /// Rounds the values to `precision` and tags the tensor with it.
    pub fn with_precision(mut self, precision: Precision) -> Tensor {
        if precision != self.precision {
            let mut data = self.storage.data().to_vec();
            precision.round_all(&mut data);
            self.storage = Arc::new(Storage::new(data, precision));
            self.precision = precision;
        }
        self
    }

    /// Accumulated gradient of a parameter, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let cell = self.grad.as_ref()?;
        let guard = cell.lock().expect("gradient lock poisoned");
        guard
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape.clone(), g.data().to_vec(), self.precision))
    }

    pub fn zero_grad(&self) {
        if let Some(cell) = &self.grad {
            *cell.lock().expect("gradient lock poisoned") = None;
        }
    }

    /// Mutable access to the values, copying the storage first if it is
    /// shared. Any tape linkage is dropped since the value no longer matches
    /// what was recorded.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.storage).data_mut()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn grad_cell(&self) -> Option<&GradCell> {
        self.grad.as_ref()
    }

    pub(crate) fn attach(mut self, node: NodeRef) -> Tensor {
        self.requires_grad = true;
        self.node = Some(node);
        self
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head = &data[..data.len().min(6)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Contract(format!(
            "shape {shape:?} must be non-empty with positive extents"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} describes {n} elements but {len} were given"
        )));
    }
    Ok(())
}
