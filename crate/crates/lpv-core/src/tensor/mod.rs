//! Dense row-major tensor with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable buffer plus an
//! optional backward-graph node (operation tag and parent handles). Leaves
//! created with [`Tensor::param`] are tracked; every op whose inputs include
//! a tracked tensor records a node, and [`Tensor::backward`] replays the
//! graph in reverse topological order.
//!
//! The scalar type is generic: `f64` for gradient-check builds where finite
//! differences need the headroom, `f32` for training. One canonical layout
//! (row-major) everywhere; transposes are explicit ops.

mod check;
mod ops;
#[cfg(test)]
mod tests;

pub use check::finite_diff_check;
pub use ops::MASK_SENTINEL_F64;

use crate::{Error, Result};
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    /// Additive mask value standing in for −∞ (see `softmax_lastdim`).
    fn mask_sentinel() -> Self {
        Self::from_f64(MASK_SENTINEL_F64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

pub(crate) use ops::Op;

pub(crate) struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Gradient accumulator; populated on tracked leaves by `backward`.
    grad: Mutex<Option<Vec<S>>>,
    /// Backward-graph record for op results; `None` on leaves and constants.
    node: Option<Op<S>>,
    /// Whether gradients flow to or through this tensor.
    tracked: bool,
}

/// Dense N-dimensional array of real scalars with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn from_parts(shape: Vec<usize>, data: Vec<S>, node: Option<Op<S>>, tracked: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                grad: Mutex::new(None),
                node,
                tracked,
            }),
        }
    }

    /// Untracked constant tensor.
    pub fn constant(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, None, false))
    }

    /// Tracked leaf (a trainable parameter or a gradient-check input).
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, None, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![S::zero(); n], None, false)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n], None, false)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let tracked = op.parents().iter().any(|p| p.inner.tracked);
        let node = if tracked { Some(op) } else { None };
        Self::from_parts(shape, data, node, tracked)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// Value of a 1-element tensor.
    pub fn value(&self) -> Result<S> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "value() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Row-major element access for tests and diagnostics.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.inner.shape.len());
        let mut flat = 0;
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < self.inner.shape[i]);
            flat = flat * self.inner.shape[i] + ix;
        }
        self.inner.data[flat]
    }

    /// Copy of the accumulated gradient, if `backward` has produced one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Same values as `self`, re-wrapped as a tracked leaf.
    pub fn as_param(&self) -> Self {
        Self::from_parts(self.inner.shape.clone(), self.inner.data.clone(), None, true)
    }

    /// Same values as `self`, cut loose from the backward graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.inner.shape.clone(), self.inner.data.clone(), None, false)
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Whether two handles share one buffer.
    pub fn same_buffer(&self, other: &Self) -> bool {
        self.ptr_id() == other.ptr_id()
    }

    /// Run reverse-mode differentiation from this scalar and return the
    /// gradient of every tracked leaf, without touching leaf `grad` fields.
    pub fn backward_grads(&self) -> Result<GradStore<S>> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let topo = self.topo_order();
        let mut flowing: HashMap<usize, Vec<S>> = HashMap::new();
        flowing.insert(self.ptr_id(), vec![S::one()]);
        let mut store = GradStore::new();
        // Reverse post-order: every consumer is processed before its inputs.
        for t in topo.iter().rev() {
            let Some(g) = flowing.remove(&t.ptr_id()) else {
                continue;
            };
            match &t.inner.node {
                Some(op) => op.backward(&t.inner, &g, &mut flowing),
                None => {
                    if t.inner.tracked {
                        store.accumulate(t, g);
                    }
                }
            }
        }
        Ok(store)
    }

    /// Reverse-mode differentiation that accumulates into each tracked
    /// leaf's `grad` field. Repeated calls without `clear_grad` accumulate.
    pub fn backward(&self) -> Result<()> {
        let store = self.backward_grads()?;
        for (leaf, g) in store.entries {
            let mut slot = leaf.inner.grad.lock().unwrap();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the reachable graph; the receiver comes last.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut state: HashMap<usize, bool> = HashMap::new(); // false = open
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.ptr_id();
            if expanded {
                if !state[&id] {
                    state.insert(id, true);
                    order.push(t);
                }
                continue;
            }
            if state.contains_key(&id) {
                continue;
            }
            state.insert(id, false);
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.node {
                for p in op.parents() {
                    if p.inner.tracked && !state.contains_key(&p.ptr_id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of tracked leaves from one `backward_grads` call.
pub struct GradStore<S: Scalar> {
    entries: Vec<(Tensor<S>, Vec<S>)>,
    index: HashMap<usize, usize>,
}

impl<S: Scalar> GradStore<S> {
    fn new() -> Self {
        GradStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn accumulate(&mut self, leaf: &Tensor<S>, g: Vec<S>) {
        match self.index.get(&leaf.ptr_id()) {
            Some(&i) => {
                for (a, b) in self.entries[i].1.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            None => {
                self.index.insert(leaf.ptr_id(), self.entries.len());
                self.entries.push((leaf.clone(), g));
            }
        }
    }

    pub fn get(&self, leaf: &Tensor<S>) -> Option<&[S]> {
        self.index
            .get(&leaf.ptr_id())
            .map(|&i| self.entries[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn accumulate_into<S: Scalar>(
    flowing: &mut HashMap<usize, Vec<S>>,
    parent: &Tensor<S>,
    g: Vec<S>,
) {
    if !parent.inner.tracked {
        return;
    }
    match flowing.get_mut(&parent.ptr_id()) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => {
            flowing.insert(parent.ptr_id(), g);
        }
    }
}
