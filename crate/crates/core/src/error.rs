use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents are incompatible.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length disagrees with the product of the extents.
    Length { expected: usize, actual: usize },
    /// A structural setting is invalid (divisibility, empty lists, zero extents).
    Config(String),
    /// The caller used an API outside its contract.
    Usage(String),
    /// Input data violates its declared domain (labels out of range, ...).
    Data(String),
    /// A NaN or infinity appeared.
    NonFinite { op: &'static str },
    MissingParam(String),
    DuplicateParam(String),
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::Length { expected, actual } => {
                write!(f, "data length {actual} does not match shape volume {expected}")
            }
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::Data(msg) => write!(f, "data error: {msg}"),
            Self::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            Self::MissingParam(name) => write!(f, "missing parameter `{name}`"),
            Self::DuplicateParam(name) => write!(f, "duplicate parameter `{name}`"),
            Self::ParamShape {
                name,
                expected,
                actual,
            } => write!(
                f,
                "parameter `{name}` has shape {actual:?}, expected {expected:?}"
            ),
        }
    }
}

impl core::error::Error for Error {}
