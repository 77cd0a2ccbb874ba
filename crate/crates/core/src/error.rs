use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Binary or structural op received incompatible shapes.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A finite-difference probe produced a non-finite value.
    #[error("non-finite value {value} at coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    /// Every pairwise distance in a batch element collapsed below the floor.
    #[error("degenerate batch element {batch}: mean pairwise distance {normalizer:e} is below the floor")]
    DegenerateBatch { batch: usize, normalizer: f64 },

    #[error("angle plan error: {0}")]
    Plan(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
