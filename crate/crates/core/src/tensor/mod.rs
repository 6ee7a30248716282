//! Dense tensors and a tape-based reverse-mode autograd.
//!
//! Everything the networks need lives here: dilated 2-D convolution, batch
//! normalization, ReLU, global average pooling, a linear head, softmax and
//! the two probability-space losses, plus SGD with momentum and weight decay.
//!
//! Tensors are generic over [`Scalar`] so the same kernels run in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod conv;
mod graph;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

pub use conv::{ConvGeometry, Padding};
pub use graph::{BatchNormStats, Graph, Gradients, Mode, Target, Var};
pub use optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};

/// Probabilities below this value are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Batch-norm epsilon added to the variance.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value detected")]
    NonFinite { op: &'static str },
    #[error("variable {0} does not belong to this graph (backward before forward?)")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Debug
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
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    /// `c = a · b (+ c)` on row-major buffers. `a` is logically `[m, k]`
    /// (stored `[k, m]` when `trans_a`), `b` is logically `[k, n]` (stored
    /// `[n, k]` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        let av = if trans_a { View::new(0, 1, m) } else { View::new(0, k, 1) };
        let bv = if trans_b { View::new(0, 1, k) } else { View::new(0, n, 1) };
        Self::gemm_view(m, k, n, a, av, b, bv, c, View::new(0, n, 1), accumulate);
    }

    /// `c = a · b (+ c)` where each operand is a strided view into a buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        av: View,
        b: &[Self],
        bv: View,
        c: &mut [Self],
        cv: View,
        accumulate: bool,
    );
}

/// A strided 2-D window into a flat buffer: element `(r, c)` lives at
/// `offset + r·row_stride + c·col_stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn new(offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride,
        }
    }

    /// Whether a `rows × cols` window fits in a buffer of `len` elements.
    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < len
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                av: View,
                b: &[Self],
                bv: View,
                c: &mut [Self],
                cv: View,
                accumulate: bool,
            ) {
                assert!(av.fits(m, k, a.len()) && bv.fits(k, n, b.len()) && cv.fits(m, n, c.len()));
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        for r in 0..m {
                            for j in 0..n {
                                c[cv.offset + r * cv.row_stride + j * cv.col_stride] = 0.0;
                            }
                        }
                    }
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every element addressed by the three views is inside
                // its buffer (checked above), and `c` is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr().add(av.offset),
                        av.row_stride as isize,
                        av.col_stride as isize,
                        b.as_ptr().add(bv.offset),
                        bv.row_stride as isize,
                        bv.col_stride as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.row_stride as isize,
                        cv.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                found: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }
}
