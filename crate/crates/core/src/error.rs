use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("window does not fit: {0}")]
    WindowTooLarge(String),
    #[error("calibration region too small: {0}")]
    AcsTooSmall(String),
    #[error("invalid filter count: {0}")]
    InvalidFilterCount(String),
    #[error("power iteration did not converge after {iters} iterations (last relative change {last_change:.3e})")]
    PowerIteration { iters: usize, last_change: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter variant mismatch: expected {expected}, got {got}")]
    VariantMismatch { expected: &'static str, got: &'static str },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("zero-norm reference")]
    ZeroNormReference,
    #[error("sampling budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("duplicate harmonic mode ({0}, {1})")]
    DuplicateMode(i64, i64),
    #[error("fixed-point solve did not converge: {0}")]
    NotConverged(String),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("declared dimensions overflow: {0}")]
    DimsOverflow(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
