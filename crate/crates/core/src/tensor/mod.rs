//! Minimal n-dimensional `f32` tensors with reverse-mode automatic
//! differentiation.
//!
//! A [`Tensor`] is a cheap handle (an `Arc`) onto a node. Nodes produced by an
//! operation while gradients are enabled remember their inputs and a backward
//! rule; together these form the computation record. Node ids are handed out
//! from a monotonically increasing counter, so every node's inputs carry
//! smaller ids than the node itself and replaying rules in descending id order
//! is a valid reverse topological order.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

pub(crate) use backward::Rule;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations, restoring the previous mode after.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Record {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) rule: Rule,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    record: Option<Record>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("dimensions must all be >= 1, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, record: Option<Record>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            record,
        }))
    }

    /// A constant (non-trainable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn parameter(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Result of an operation. The record is only materialized when gradients
    /// are enabled and at least one input requires them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        rule: impl FnOnce() -> Rule,
    ) -> Self {
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let record = requires_grad.then(|| Record {
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            rule: rule(),
        });
        Self::build(shape, data, requires_grad, record)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access to the values. Only meaningful for leaves (parameters);
    /// the optimizer writes through this.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f32>> {
        self.0.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites the stored gradient (used by clipping).
    pub fn set_grad(&self, g: Vec<f32>) {
        assert_eq!(g.len(), self.numel(), "gradient length");
        *self.0.grad.lock().expect("grad lock poisoned") = Some(g);
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// A fresh constant holding a copy of the values, cut off from the record.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// True when both handles refer to the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn record(&self) -> Option<&Record> {
        self.0.record.as_ref()
    }

    /// Reverse-mode pass from a one-element `self`.
    ///
    /// Gradients are added into the `grad` field of every trainable leaf that
    /// participates; nothing is reset, so calling this twice doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that is not connected to any parameter".into(),
            ));
        }
        backward::run(self);
        Ok(())
    }
}
