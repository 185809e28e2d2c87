//! Dense 5-D tensor storage, indexed `(batch, channel, time, height, width)`
//! in row-major order.

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Scalar element for tensor computations. The network trains in `f32`;
/// verification (convolution oracle, gradient checks) runs in `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// C := alpha * A(m x k) * B(k x n) + beta * C(m x n), all row-major.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    /// C(m x n, row-major) += A * B with explicit (row, col) strides on A and B.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );

    fn from_real(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }
    fn to_f64x(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Element for f32 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Shape of a [`Tensor5`]: `(n, c, t, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, t, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Flat row-major offset of `(n, c, t, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::config(format!("all shape components must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl fmt::Debug for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.c, self.t, self.h, self.w)
    }
}

/// Dense 5-D tensor. Immutable once built; clones share storage.
#[derive(Clone)]
pub struct Tensor5<E: Element> {
    pub shape: Shape5,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor5<E> {
    pub fn new(shape: Shape5, data: Vec<E>) -> Self {
        assert_eq!(shape.numel(), data.len(), "data length must equal shape numel");
        Tensor5 {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor5::new(shape, vec![E::zero(); shape.numel()])
    }

    pub fn full(shape: Shape5, v: E) -> Self {
        Tensor5::new(shape, vec![v; shape.numel()])
    }

    pub fn scalar(v: E) -> Self {
        Tensor5::new(Shape5::new(1, 1, 1, 1, 1), vec![v])
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> E {
        self.data[self.shape.index(n, c, t, h, w)]
    }

    /// Scalar value of a `(1,1,1,1,1)` tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// Same storage under a different shape with equal element count.
    /// Row-major layout makes this a metadata-only operation.
    pub fn reshaped(&self, shape: Shape5) -> Result<Tensor5<E>> {
        if shape.numel() != self.numel() {
            return Err(Error::config(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor5 {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor5<E> {
        Tensor5::new(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Replace one coordinate, copying storage. Used by the finite-difference
    /// harness; not a graph operation.
    pub fn with_value_at(&self, flat: usize, v: E) -> Tensor5<E> {
        let mut d = self.data.as_ref().clone();
        d[flat] = v;
        Tensor5::new(self.shape, d)
    }
}

impl<E: Element> fmt::Debug for Tensor5<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor5{:?}", self.shape)
    }
}
