//! Error type shared by the numeric modules.
//!
//! Non-finite values are hard errors everywhere in this crate: an operation
//! that would produce NaN or ±Inf reports [`Error::NonFinite`] instead of
//! letting the value propagate.

use std::fmt;

/// Errors raised by tensor, tape, and model operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Reduction or softmax axis is out of range for the operand rank.
    AxisOutOfRange { axis: usize, rank: usize },
    /// An operation produced (or was handed) a NaN or ±Inf value.
    NonFinite { op: &'static str },
    /// Input lies outside the mathematical domain of the operation.
    Domain { op: &'static str, detail: String },
    /// `backward` was called on a node that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// Two hyperbolic values with different curvatures were combined.
    CurvatureMismatch { lhs: f64, rhs: f64 },
    /// A feature row had zero norm where a direction was required.
    DegenerateFeature { row: usize },
    /// Configuration or argument validation failure.
    InvalidArgument { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Self::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss node, got shape {shape:?}")
            }
            Self::CurvatureMismatch { lhs, rhs } => {
                write!(f, "curvature mismatch: {lhs} vs {rhs}")
            }
            Self::DegenerateFeature { row } => {
                write!(f, "feature row {row} has zero norm")
            }
            Self::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
