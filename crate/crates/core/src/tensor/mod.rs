//! Dense row-major tensors over `f32`/`f64` with byte accounting.
//!
//! The numeric core of the crate: a small [`Tensor`] type whose buffers
//! register themselves with the thread-local counters in [`crate::mem`], a
//! [`Scalar`] trait that lets the same kernels and the same autodiff tape run
//! in 32-bit (production) and 64-bit (gradient verification), and the
//! submodules with the actual math:
//!
//! * [`kernels`] — matmul (BLAS-backed), softmax, RMS norm, rotary embedding,
//!   SiLU, cross-entropy; pure functions shared by the inference path and the
//!   training tape.
//! * [`tape`] — reverse-mode autodiff over a flat operation tape.
//! * [`optim`] — AdamW with decoupled weight decay.

pub mod check;
pub mod kernels;
pub mod optim;
pub mod tape;

use crate::mem;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element types the numeric stack is generic over.
///
/// `f32` is the production type; `f64` exists so gradient checks can run at
/// a precision where central finite differences are trustworthy.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Large negative additive constant used to disable attention logits.
    /// Finite so that softmax stays NaN-free even on fully masked rows.
    const MASK_NEG: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, o: Self) -> Self;

    /// General matrix multiply on row-major buffers:
    /// `c = alpha * a@b + beta * c` with explicit strides (rows, cols).
    /// Dispatches to the BLAS-style kernel for the concrete type.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const MASK_NEG: Self = -1.0e30;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn powf(self, e: Self) -> Self {
                self.powf(e)
            }
            #[inline]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maximum(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds: the highest linear index each operand touches.
                let hi = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
                    let r = (rows as isize - 1).max(0) * rs;
                    let cidx = (cols as isize - 1).max(0) * cs;
                    (r + cidx) as usize
                };
                assert!(k == 0 || a.len() > hi(m, k, rsa, csa), "gemm: a out of bounds");
                assert!(k == 0 || b.len() > hi(k, n, rsb, csb), "gemm: b out of bounds");
                assert!(c.len() > hi(m, n, rsc, csc), "gemm: c out of bounds");
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = (i as isize * rsc + j as isize * csc) as usize;
                            c[idx] *= beta;
                        }
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Heap buffer that reports its size to the thread-local byte counters.
struct Storage<T> {
    buf: Vec<T>,
}

impl<T> Storage<T> {
    fn new(buf: Vec<T>) -> Self {
        mem::on_alloc(buf.len() * std::mem::size_of::<T>());
        Storage { buf }
    }
}

impl<T: Clone> Clone for Storage<T> {
    fn clone(&self) -> Self {
        Storage::new(self.buf.clone())
    }
}

impl<T> Drop for Storage<T> {
    fn drop(&mut self) {
        mem::on_free(self.buf.len() * std::mem::size_of::<T>());
    }
}

/// Dense row-major tensor. Rank 1 or 2 in practice; shape `[r, c]` indexes as
/// `data[i * c + j]`.
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Storage<T>,
    /// Whether gradients should be accumulated for this tensor when it is
    /// registered as a tape leaf. Plain data tensors leave it `false`.
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Storage::new(vec![T::ZERO; n]),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Storage::new(vec![v; n]),
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match {} elements", shape, data.len());
        Tensor {
            shape: shape.to_vec(),
            data: Storage::new(data),
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Gaussian init via Box-Muller, mean 0, the given standard deviation.
    pub fn randn(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * th.cos() * std));
            if data.len() < n {
                data.push(T::from_f64(r * th.sin() * std));
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: Storage::new(data),
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.buf.len()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor (length, for rank 1).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data.buf
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data.buf
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data.buf[i * self.shape[1] + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    /// Elementwise `self += s * other`.
    pub fn add_scaled_assign(&mut self, other: &Tensor<T>, s: T) {
        assert_eq!(self.shape, other.shape);
        for (d, o) in self.data.buf.iter_mut().zip(other.data.buf.iter()) {
            *d += s * *o;
        }
    }

    pub fn fill(&mut self, v: T) {
        for d in self.data.buf.iter_mut() {
            *d = v;
        }
    }

    /// Convert elementwise through `f64` into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.buf.iter().map(|v| U::from_f64(v.to_f64())).collect();
        let mut t = Tensor::from_vec(&self.shape, data);
        t.requires_grad = self.requires_grad;
        t
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data.buf.iter().zip(other.data.buf.iter()) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Some(worst)
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data.buf[..])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_indexing() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.at(1, 2), 6.0);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn allocation_is_accounted_and_released() {
        let before = crate::mem::live_bytes();
        {
            let _t = Tensor::<f32>::zeros(&[128, 128]);
            assert_eq!(crate::mem::live_bytes(), before + 128 * 128 * 4);
        }
        assert_eq!(crate::mem::live_bytes(), before);
    }

    #[test]
    fn clone_is_deep_and_accounted() {
        let before = crate::mem::live_bytes();
        let a = Tensor::<f64>::from_vec(&[4], vec![1., 2., 3., 4.]);
        let mut b = a.clone();
        b.as_mut_slice()[0] = 9.0;
        assert_eq!(a.as_slice()[0], 1.0);
        assert_eq!(crate::mem::live_bytes(), before + 2 * 4 * 8);
    }

    #[test]
    fn randn_moments_are_plausible() {
        let mut rng = crate::rng::derive(42, "test.randn");
        let t = Tensor::<f64>::randn(&mut rng, &[10_000], 2.0);
        let mean: f64 = t.as_slice().iter().sum::<f64>() / 10_000.0;
        let var: f64 = t.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn cast_round_trip() {
        let a = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 3.0]);
        let b: Tensor<f64> = a.cast();
        let c: Tensor<f32> = b.cast();
        assert_eq!(a.as_slice(), c.as_slice());
    }
}
