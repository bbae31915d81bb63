//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, plus the Adam optimizer.
//!
//! Values live as nodes on a [`Tape`]. Forward ops append nodes in topological
//! order; [`Tape::backward`] consumes the tape and replays it once in reverse.
//! Tensors are immutable after the forward pass. A tape has a single owner and
//! is never shared between threads; parallel evaluation uses one tape per
//! batch with shared read-only [`Params`].
//!
//! Training runs in `f32`; the gradient-check suite instantiates the same code
//! with `f64` to keep finite-difference noise away from the tolerance.

mod adam;
mod conv;
mod ops;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use conv::BnStats;
pub use params::{PTensor, Params};
pub use tape::{GradStore, Gradients, Tape, Var};

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Element dtype of a tensor, as persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element type of the engine. Implemented for `f32` and `f64`.
pub trait Elem:
    Copy
    + PartialOrd
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, p: Self) -> Self;
    fn max_e(self, o: Self) -> Self;
    fn min_e(self, o: Self) -> Self;
    fn is_finite_e(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(b: &[u8]) -> Self;
}

macro_rules! impl_elem {
    ($t:ty, $dt:expr) => {
        impl Elem for $t {
            const DTYPE: Dtype = $dt;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn powf(self, p: Self) -> Self {
                self.powf(p)
            }
            fn max_e(self, o: Self) -> Self {
                self.max(o)
            }
            fn min_e(self, o: Self) -> Self {
                self.min(o)
            }
            fn is_finite_e(self) -> bool {
                self.is_finite()
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().expect("element byte width"))
            }
        }
    };
}

impl_elem!(f32, Dtype::F32);
impl_elem!(f64, Dtype::F64);

/// Errors raised by tensor operations.
#[derive(thiserror::Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: division guard tripped (zero or non-finite denominator)")]
    DivisionGuard { op: &'static str },
    #[error("missing gradient for registered parameter '{0}'")]
    MissingGrad(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("{op}: target index {index} out of range for {classes} classes")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn shape_err<T>(op: &'static str, details: String) -> Result<T> {
    Err(TensorError::Shape { op, details })
}
