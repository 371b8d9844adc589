use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Spatial or temporal axis of a space-time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    T,
    Y,
    X,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::T => write!(f, "t"),
            Axis::Y => write!(f, "y"),
            Axis::X => write!(f, "x"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("index {index} out of range on axis {axis} (size {size})")]
    IndexOutOfRange { axis: Axis, index: usize, size: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("bad magic bytes {0:?}, expected \"STGF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported STGF version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported STGF dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("payload length {got} bytes does not match header dims (expected {expected})")]
    DimMismatch { expected: usize, got: usize },

    #[error("diffusion tensor not positive definite at t={t}, y={y}, x={x}")]
    NonSpdDiffusion { t: usize, y: usize, x: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unsupported smoothness alpha={0} (must be 2, 4 or 6)")]
    UnsupportedAlpha(u32),

    #[error("transition matrix at step {0} is singular")]
    SingularTransition(usize),

    #[error("degenerate noise at step {t}: tau too small ({min_tau:e}); floor tau above zero")]
    DegenerateNoise { t: usize, min_tau: f64 },

    #[error("matrix not positive definite (pivot at row {0})")]
    NotPositiveDefinite(usize),

    #[error("iterative solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("problem dimension {dim} exceeds dense guard {limit}")]
    DimensionGuard { dim: usize, limit: usize },

    #[error("non-finite gradient at solver iteration {0}")]
    DivergedStep(usize),

    #[error("non-finite loss at fit step {0}")]
    DivergedFit(usize),

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    /// True for failures that stem from the numerics rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularTransition(_)
            | Error::DegenerateNoise { .. }
            | Error::NotPositiveDefinite(_)
            | Error::MaxIterations { .. }
            | Error::DivergedStep(_)
            | Error::DivergedFit(_) => true,
            Error::Member { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
