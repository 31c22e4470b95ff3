use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bubble is not contained in the open unit cell (max |coordinate| = {extent}, limit {limit})")]
    BubbleNotContained { extent: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel evaluated at its singular point")]
    SingularEvaluation,

    #[error("resonant denominator at lattice index {n:?}: |k^2 - |2 pi n + alpha|^2| = {gap:e}")]
    ResonantDenominator { n: [i64; 3], gap: f64 },

    #[error("kernel undefined for alpha = 0 at k = 0")]
    UndefinedAtZeroAlpha,

    #[error("operator is numerically singular (smallest singular value {sigma_min:e}, norm {norm:e})")]
    IllConditioned { sigma_min: f64, norm: f64 },

    #[error("mesh carries no surface parameterization; singular quadrature needs one")]
    MissingParameterization,

    #[error("nominally real quantity has imaginary part {imag:e} (value {real:e})")]
    NotReal { real: f64, imag: f64 },

    #[error("effective tensor is not positive semi-definite (min eigenvalue {min_eig:e})")]
    NotPositiveSemiDefinite { min_eig: f64 },

    #[error("degenerate direction: d^T lambda d = {value:e}")]
    DegenerateDirection { value: f64 },

    #[error("root finder did not converge after {iterations} iterations (last omega {omega}, residual {residual:e})")]
    NoConvergence { iterations: usize, omega: f64, residual: f64 },

    #[error("evaluation point lies on the surface")]
    OnSurface,

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
