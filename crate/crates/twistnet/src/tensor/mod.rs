//! Dense tensors with reverse-mode autodiff support.
//!
//! A [`Tensor`] is a shape plus a shared, contiguous value buffer. Feature
//! maps use `N x C x H x W` order (outermost first). Training runs in `f32`;
//! every op is generic over [`Element`] so gradient checking can run the
//! identical code path in `f64`.

pub mod rng;
pub mod tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Element: Float + fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c[m][n] += sum_k a[m][k] * b[k][n]`, all row-major.
    ///
    /// The accumulation over `k` is sequential per output element, so the
    /// result is identical to the textbook triple loop.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        crate::ops::gemm::gemm_nn_generic(m, k, n, a, b, c);
    }

    /// `c[m][n] += sum_k a[m][k] * b[n][k]` (`b` accessed transposed).
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        crate::ops::gemm::gemm_nt_generic(m, k, n, a, b, c);
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        crate::ops::gemm::gemm_nn_f32(m, k, n, a, b, c);
    }
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        crate::ops::gemm::gemm_nt_f32(m, k, n, a, b, c);
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) type DataCell<E> = Rc<RefCell<Vec<E>>>;
pub(crate) type GradCell<E> = Rc<RefCell<Option<Vec<E>>>>;

/// Dense N-dimensional array with an optional gradient buffer.
///
/// Cloning is cheap: clones share the value buffer and the gradient cell, so
/// a parameter used in several places accumulates into one gradient.
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: DataCell<E>,
    grad: GradCell<E>,
    requires_grad: bool,
    node: Cell<Option<usize>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            grad: Rc::clone(&self.grad),
            requires_grad: self.requires_grad,
            node: self.node.clone(),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}{}",
            self.shape,
            if self.requires_grad { " (grad)" } else { "" }
        )
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(RefCell::new(data)),
            grad: Rc::new(RefCell::new(None)),
            requires_grad: false,
            node: Cell::new(None),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![E::zero(); numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("consistent by construction")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor::from_vec(shape, data).expect("consistent by construction")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.data.borrow_mut()
    }

    /// Copy of the buffer as `f64`, for tests and reporting.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| Element::as_f64(*v)).collect()
    }

    /// Single element by multi-index; for tests and small utilities.
    pub fn at(&self, index: &[usize]) -> E {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        self.data()[off]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst = *dst + *src;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn grad_cell(&self) -> GradCell<E> {
        Rc::clone(&self.grad)
    }

    pub(crate) fn data_cell(&self) -> DataCell<E> {
        Rc::clone(&self.data)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.get()
    }

    pub(crate) fn set_node(&self, id: usize) {
        self.node.set(Some(id));
    }

    pub(crate) fn set_requires(&mut self, requires: bool) {
        self.requires_grad = requires;
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Dimensions of an `N x C x H x W` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn of<E: Element>(t: &Tensor<E>) -> Result<Dims4> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected 4-d tensor, got {:?}", s)));
        }
        Ok(Dims4 {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
        })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn clones_share_grad() {
        let t = Tensor::<f32>::zeros(&[3]).requires_grad();
        let u = t.clone();
        u.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 0.0, 0.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0, 3.0]);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }
}
