//! Dense f64 tensors with tape-style reverse-mode differentiation.
//!
//! Every tensor produced by an op while gradients are enabled and at least one
//! input requires a gradient records a node: its parents plus a closure that
//! maps the output gradient to parent gradients. Node ids are drawn from a
//! global monotonic counter, so sorting the reachable nodes by descending id
//! replays the execution order in reverse.

mod grad_check;
pub(crate) mod linalg;
mod ops;

pub use grad_check::{grad_check, grad_check_many, numeric_grad};
pub use ops::{elementwise, ElementwiseKind, Operand};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);
static DEBUG_FINITE: AtomicBool = AtomicBool::new(false);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Turns on the per-op non-finite check.
pub fn set_debug_checks(on: bool) {
    DEBUG_FINITE.store(on, Ordering::Relaxed);
}

pub fn debug_checks() -> bool {
    DEBUG_FINITE.load(Ordering::Relaxed)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Creates a constant leaf. Rejects count mismatches and non-finite values.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let expected = numel_of(shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self::make(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Creates a trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::make(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Returns a leaf sharing this tensor's data with the requested flag.
    pub fn requires_grad(&self, flag: bool) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), flag, None)
    }

    /// Returns a constant leaf sharing this tensor's data.
    pub fn detach(&self) -> Self {
        self.requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::geometry(format!(
                "expected a rank-4 NCHW tensor, got {:?}",
                self.shape()
            ))),
        }
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let guard = self.0.grad.lock().expect("grad lock poisoned");
        guard
            .as_ref()
            .map(|g| Self::make(self.0.shape.clone(), Arc::new(g.clone()), false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.0.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Builds the output of an op, recording a graph node when needed.
    pub(crate) fn from_op<F>(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op} produced wrong element count");
        if debug_checks() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let track = is_grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let node = track.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Ok(Self::make(shape, Arc::new(data), track, node))
    }

    /// Output that shares the input's buffer (reshape).
    pub(crate) fn from_op_shared<F>(
        op: &'static str,
        src: &Tensor,
        shape: Vec<usize>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        let track = is_grad_enabled() && src.0.requires_grad;
        let node = track.then(|| Node {
            op,
            parents: vec![src.clone()],
            backward: Box::new(backward),
        });
        Self::make(shape, src.0.data.clone(), track, node)
    }

    /// Back-propagates from a scalar loss into every reachable leaf that
    /// requires a gradient. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.0.requires_grad {
            return Err(Error::NotOnGraph);
        }
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.0.requires_grad && p.0.node.is_some() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
                order.push(t);
            }
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.as_ref().expect("non-leaf has node");
            let parent_grads = (node.backward)(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.0.requires_grad {
                    continue;
                }
                if p.is_leaf() {
                    p.accumulate_grad(&pg);
                } else {
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
