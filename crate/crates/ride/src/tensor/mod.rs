//! Dense tensors with reverse-mode differentiation.
//!
//! Everything in this crate that learns or needs a gradient goes through
//! this module. Tensors are row-major `Vec`-backed values behind an `Rc`;
//! operations link each result to its inputs, and [`Tensor::backward`]
//! walks the resulting DAG once in reverse topological order, accumulating
//! vector-Jacobian products into the leaves created with [`Tensor::param`].
//!
//! The engine is deliberately small: no broadcasting, no views, no
//! threads. Shapes must match exactly and every op writes a fresh buffer.
//! Reductions, convolutions and matrix products run the same sequential
//! kernels in every process, so a fixed seed reproduces results to the bit.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, NumAssign};
use thiserror::Error;

pub mod check;
pub mod container;
mod gemm;
mod grad;
#[cfg(test)]
mod gradtests;
mod linmap;
mod ops;

pub use linmap::LinMap;

/// Element type of a [`Tensor`]: `f32` for real workloads, `f64` when a
/// test wants finite differences to be trustworthy.
pub trait Scalar: Float + NumAssign + Default + fmt::Debug + fmt::Display + 'static {
    /// Dtype tag used in error messages.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a@b + beta * c` over row/column strides in elements.
    ///
    /// # Safety
    /// The pointers must cover every element addressed by the stride
    /// pattern for the given `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("index {index} out of bounds for axis of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("backward needs a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> TensorError {
    TensorError::Contract(msg.into())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Differentiable op recorded on a graph node. Variants carry whatever the
/// backward pass cannot recompute cheaply from inputs and output.
pub(crate) enum Op<F: Scalar> {
    Add,
    Sub,
    Mul,
    Neg,
    AddScalar,
    MulScalar(F),
    Relu,
    Sigmoid,
    Exp,
    LnClamped(F),
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    MaxAxis { axis: usize, argmax: Vec<u32> },
    Softmax { axis: usize },
    L2Normalize { axis: usize, norms: Vec<F> },
    MatmulNN,
    MatmulNT,
    MatmulTN,
    Conv2dValid,
    BatchNorm { xhat: Vec<F>, inv_std: Vec<F> },
    AffineChannels,
    IndexSelect { axis: usize, indices: Rc<Vec<usize>> },
    GroupShift { offsets: Rc<Vec<i64>> },
    LinMapApply(Rc<LinMap>),
    Reshape,
}

struct Inner<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    /// Gradient is accumulated here during backward; only for params.
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    /// True when some ancestor requires a gradient, i.e. the node must
    /// keep its parents alive and propagate during backward.
    tracked: bool,
    parents: Vec<Tensor<F>>,
    op: Option<Op<F>>,
}

/// Row-major dense tensor, cheaply cloneable (the clone shares storage).
pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &F::NAME)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    fn make(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        tracked: bool,
        parents: Vec<Tensor<F>>,
        op: Option<Op<F>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tracked,
                parents,
                op,
            }),
        }
    }

    /// Non-learnable leaf from explicit data.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let n = numel_of(shape);
        if n == 0 {
            return Err(contract(format!("empty tensor shape {shape:?}")));
        }
        if data.len() != n {
            return Err(contract(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, false, false, Vec::new(), None))
    }

    /// Learnable leaf: `backward` accumulates a gradient here.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let n = numel_of(shape);
        if n == 0 {
            return Err(contract(format!("empty tensor shape {shape:?}")));
        }
        if data.len() != n {
            return Err(contract(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, true, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::from_vec(shape, vec![F::zero(); numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: F) -> Result<Self, TensorError> {
        Self::from_vec(shape, vec![v; numel_of(shape)])
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(&[1], vec![v]).expect("scalar shape is valid")
    }

    /// Internal constructor for op results.
    pub(crate) fn result(shape: Vec<usize>, data: Vec<F>, parents: Vec<Tensor<F>>, op: Op<F>) -> Self {
        let tracked = parents.iter().any(|p| p.inner.tracked);
        if tracked {
            Self::make(shape, data, false, true, parents, Some(op))
        } else {
            // Inference path: drop the graph so buffers free eagerly.
            Self::make(shape, data, false, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Meant for leaves (optimizer
    /// updates, test setup); mutating an interior node invalidates any
    /// graph built on the old value.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.inner.data.borrow_mut()
    }

    /// Accumulated gradient, if backward has touched this param.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<F>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() needs a single-element tensor");
        self.inner.data.borrow()[0]
    }

    /// Untracked copy of the current value (stop-gradient).
    pub fn detach(&self) -> Self {
        Self::make(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            false,
            Vec::new(),
            None,
        )
    }

    /// Untracked copy in another element type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        let data = self.inner.data.borrow().iter().map(|&v| G::from_f64(v.to_f64())).collect();
        Tensor::<G>::make(self.inner.shape.clone(), data, false, false, Vec::new(), None)
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().iter().map(|&v| v.to_f64() as f32).collect()
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable `param` leaf; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        let order = self.topo_order();
        let mut flows: HashMap<u64, Vec<F>> = HashMap::new();
        flows.insert(self.id(), vec![F::one()]);
        for node in &order {
            let Some(g) = flows.remove(&node.id()) else { continue };
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if node.inner.op.is_some() {
                grad::accumulate_vjps(node, &g, &mut flows);
            }
        }
        Ok(())
    }

    /// Nodes ordered so every node precedes its parents.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut post: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // (node, next child index) pairs; iterative to keep deep chains safe.
        let mut stack: Vec<(Tensor<F>, usize)> = Vec::new();
        if self.inner.tracked {
            seen.insert(self.id());
            stack.push((self.clone(), 0));
        }
        while let Some((node, idx)) = stack.pop() {
            if idx < node.inner.parents.len() {
                let parent = node.inner.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.inner.tracked && seen.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                post.push(node);
            }
        }
        post.reverse();
        post
    }

    pub(crate) fn parents(&self) -> &[Tensor<F>] {
        &self.inner.parents
    }

    pub(crate) fn op(&self) -> Option<&Op<F>> {
        self.inner.op.as_ref()
    }

    pub(crate) fn tracked(&self) -> bool {
        self.inner.tracked
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`: element
/// `(o, i, j)` lives at `(o * len + i) * inner + j`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
