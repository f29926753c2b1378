use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("cholesky factorization failed: non-positive pivot {value:.6e} at row {pivot}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("conjugate gradient breakdown: non-positive curvature {0:.3e}")]
    CgBreakdown(f64),
    #[error("root bracketing failed for KL mode {0}")]
    RootNotFound(usize),
    #[error("zero-norm vector at point {0}")]
    ZeroNorm(usize),
    #[error("rank deficiency in Gram-Schmidt at quadrature point {point} (vector {vector})")]
    RankDeficient { point: usize, vector: usize },
    #[error("singular element geometry in element {0}")]
    SingularElement(usize),
    #[error("eigensolver failed at sample {0}")]
    SampleFailed(usize),
    #[error("kde requires at least two distinct samples")]
    DegenerateSamples,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
