use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coefficient field is not elliptic at {point:?}: smallest eigenvalue {min_eigenvalue:e}")]
    NotElliptic { point: Vec<f64>, min_eigenvalue: f64 },

    #[error("coefficient field is not symmetric at {point:?} (asymmetry {asymmetry:e})")]
    NotSymmetric { point: Vec<f64>, asymmetry: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("iterative solver did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("Fourier cutoff {cutoff} too small: truncation residual {residual:e} exceeds tolerance {tol:e}; refine the cutoff")]
    CutoffTooSmall { cutoff: usize, residual: f64, tol: f64 },

    #[error("corrector was computed from a different coefficient field")]
    ProvenanceMismatch,

    #[error("kernel evaluated at coincident points")]
    SingularEvaluation,

    #[error("polygon is not simple: edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),

    #[error("polygon must be counterclockwise")]
    Orientation,

    #[error("graph violates the Lipschitz bound {bound}: slope {slope} between x'={a} and x'={b}")]
    LipschitzViolation { bound: f64, slope: f64, a: f64, b: f64 },

    #[error("feature {feature} has {panels} panels; at least 3 are needed for tangential differences")]
    MeshTooCoarse { feature: usize, panels: usize },

    #[error("ratio undefined: denominator {denominator:e} vanishes")]
    DegenerateRatio { denominator: f64 },

    #[error("singular or near-singular system (estimated condition {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("grid spacing {h} violates the resolution rule; need h <= {required}")]
    Resolution { h: f64, required: f64 },

    #[error("problem too large: {nodes} nodes")]
    TooLarge { nodes: usize },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
