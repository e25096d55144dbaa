use nalgebra::DVector;

/// Errors produced by norm evaluation, deformation and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("division by a jet whose constant term is within 1e-14 of zero")]
    DivisionByNearZero,
    #[error("{func}: argument {value} outside the function domain")]
    DomainError { func: &'static str, value: f64 },
    #[error("norm evaluated at the zero vector")]
    ZeroVector,
    #[error("point outside the (conic) domain of the norm: {0}")]
    OutsideDomain(String),
    #[error("fundamental tensor numerically singular (condition number > 1e12)")]
    SingularMetric,
    #[error("the 1-forms of the deformation are not linearly independent")]
    RankDeficientBetas,
    #[error("epsilon = sum_j s_j rho1^j is within 1e-10 of zero; rank form unusable")]
    EpsilonNearZero,
    #[error("no bracket found: target outside the range of the ray map")]
    NoBracket,
    #[error("phi - sum_i s_i dphi_i <= 0 on the searched segment")]
    MonotonicityViolation,
    #[error("phi - 1 changes sign over the sampled directions")]
    SignChange,
    #[error("|Fbar^2 - F^2| below 1e-12 at a sampled direction")]
    DegenerateDifference,
    #[error("base matrix is singular")]
    SingularBase,
    #[error("mean Cartan torsion vanishes; semi-C-reducible fit undefined")]
    VanishingMeanCartan,
    #[error("need at least {needed} usable samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("eigen-decomposition of the rank-form matrix is ill conditioned")]
    IllConditionedEigen,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unknown builtin phi: {0}")]
    UnknownBuiltin(String),
    #[error("empty indicatrix sample")]
    EmptySample,
    #[error("iteration step {step} left the domain: {source}")]
    IterationDomain {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("phi parse error: {0}")]
    Parse(#[from] crate::phi::ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn outside_domain(y: &DVector<f64>) -> Self {
        Error::OutsideDomain(format!("{:?}", y.as_slice()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
