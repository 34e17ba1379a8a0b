//! Dense row-major tensors with a recorded reverse-mode graph.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node holding its values, an
//! optional accumulated gradient, and, for op outputs that depend on
//! trainable leaves, the backward rule together with its parents. Node ids
//! grow monotonically, so processing reachable nodes in decreasing id order
//! is a valid reverse topological order.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, shapes: impl fmt::Debug) -> TensorError {
    TensorError::Shape {
        op,
        shapes: format!("{shapes:?}"),
    }
}

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        reason: reason.into(),
    }
}

/// Scalar element type. Implemented for `f32` (training) and `f64` (checks).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const NAME: &'static str;

    /// `C = alpha * A·B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
    fn as_f32_bits(self) -> u32;
    fn from_f32_bits(bits: u32) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn as_f32_bits(self) -> u32 {
        self.to_bits()
    }
    fn from_f32_bits(bits: u32) -> Self {
        f32::from_bits(bits)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn as_f32_bits(self) -> u32 {
        (self as f32).to_bits()
    }
    fn from_f32_bits(bits: u32) -> Self {
        f32::from_bits(bits) as f64
    }
}

/// Backward rule: given the output gradient, the parents and the output
/// values, return one optional gradient per parent.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[Tensor<S>], &[S]) -> Vec<Option<Vec<S>>>>;

struct Origin<S: Real> {
    op: &'static str,
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Node<S: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    origin: Option<Origin<S>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone)]
pub struct Tensor<S: Real = f64>(Rc<Node<S>>);

impl<S: Real> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording backward rules (inference).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

impl<S: Real> Tensor<S> {
    fn build(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, origin: Option<Origin<S>>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            origin,
        }))
    }

    fn checked(shape: &[usize], data: &[S]) -> Result<()> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(shape_err("new", (shape, data.len())));
        }
        if numel(shape) != data.len() {
            return Err(shape_err("new", (shape, data.len())));
        }
        Ok(())
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::checked(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::checked(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![S::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: S) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Op output. Records the backward rule only if some parent needs it.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = GRAD_ENABLED.with(|g| g.get()) && parents.iter().any(|p| p.requires_grad());
        let origin = requires_grad.then(|| Origin {
            op,
            parents,
            backward,
        });
        Ok(Self::build(shape, data, requires_grad, origin))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> S {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.origin.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.origin.as_ref().map(|o| o.op)
    }

    pub fn same_storage(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<S>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_mut(&self) -> std::cell::RefMut<'_, Option<Vec<S>>> {
        self.0.grad.borrow_mut()
    }

    /// Overwrite leaf values in place (optimizer updates, finite differences).
    pub fn set_data(&self, values: &[S]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if data.len() != values.len() {
            return Err(shape_err("set_data", (data.len(), values.len())));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Constant copy detached from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Reverse pass from a scalar. Gradients accumulate on trainable leaves.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.id(), ()).is_some() {
                continue;
            }
            if let Some(origin) = &t.0.origin {
                for p in &origin.parents {
                    if p.requires_grad() && !seen.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for node in order {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.origin {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(origin) => {
                    let out = node.0.data.borrow();
                    let parent_grads = (origin.backward)(&g, &origin.parents, &out);
                    debug_assert_eq!(parent_grads.len(), origin.parents.len(), "{}", origin.op);
                    for (p, pg) in origin.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        if pg.iter().any(|v| !v.is_finite()) {
                            return Err(TensorError::NonFinite { op: origin.op });
                        }
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_skips_recording() {
        let p = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| p.scale(2.0).unwrap());
        assert!(!y.requires_grad());
        assert!(p.scale(2.0).unwrap().requires_grad());
    }

    #[test]
    fn shape_data_contract() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let t = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn f32_bits_round_trip() {
        let x = 0.1f32;
        assert_eq!(f32::from_f32_bits(x.as_f32_bits()).to_bits(), x.to_bits());
    }
}
