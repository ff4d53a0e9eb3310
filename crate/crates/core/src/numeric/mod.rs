//! Dense tensor core with a recording tape for reverse-mode differentiation
//! and an Adam optimizer.
//!
//! Training runs in `f32`. Every type is generic over [`Scalar`] so the same
//! forward code can be replayed in `f64` for finite-difference checks.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod init;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;

pub use kernels::{l2_normalize_rows, matmul, row_cross_entropy, row_softmax, NORM_EPSILON};
pub use optim::{Adam, ParamId, ParamStore, Parameter};
pub use tape::{CsrMatrix, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("target {target} out of range for {classes} classes (row {row})")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = NumericError> = std::result::Result<T, E>;

/// Floating-point element type of tensors.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` over strided row-major buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the strides above address exactly the m*k, k*n and m*n
                // row-major buffers whose lengths are checked by the callers.
                unsafe {
                    $gemm(
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
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn lit(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

static ZERO_NORM_ROWS: AtomicUsize = AtomicUsize::new(0);

/// Number of zero rows that hit the epsilon guard in row normalization since
/// process start.
pub fn zero_norm_warnings() -> usize {
    ZERO_NORM_ROWS.load(Ordering::Relaxed)
}

pub(crate) fn note_zero_norm_row() {
    if ZERO_NORM_ROWS.fetch_add(1, Ordering::Relaxed) == 0 {
        log::warn!("l2 normalization hit a zero row; using epsilon-guarded norm");
    }
}
