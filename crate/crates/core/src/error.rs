use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown variable index {var} (polynomial has {nvars} variables)")]
    UnknownVariable { var: usize, nvars: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("closed-form control minimizer requires affine_in_u and quadratic_in_u")]
    ClosedFormUnavailable,

    #[error("control Hessian H_uu not positive definite at queried point (second-order condition violated)")]
    HessianNotPositiveDefinite,

    #[error("symbolic lift requires a closed-form control minimizer")]
    SymbolicLiftNeedsClosedForm,

    #[error("internal consistency failure: {0}")]
    ConsistencyFailure(String),

    #[error("quadrature order insufficient: integrand degree {needed} exceeds exact degree {available}")]
    QuadratureOrderInsufficient { needed: u32, available: u32 },

    #[error("test functions are not boundary-vanishing: {0}")]
    NotBoundaryVanishing(String),

    #[error("symplectic Gram matrix is singular or near-singular (pivot {pivot:.3e})")]
    SingularSkewGram { pivot: f64 },

    #[error("eigensolver failed to converge")]
    EigenNonConvergence,

    #[error("eigenpair {index} residual {residual:.3e} exceeds tolerance")]
    EigenResidualTooLarge { index: usize, residual: f64 },

    #[error("no unstable eigenvalues above threshold {tau:.3e}")]
    NoUnstableEigenvalues { tau: f64 },

    #[error("only {got} manifold equations available, need {need}")]
    InsufficientEquations { got: usize, need: usize },

    #[error("Newton solve failed at x = {x:?}: {reason}")]
    NewtonFailure { x: Vec<f64>, reason: String },

    #[error("trajectory blow-up: state norm {norm:.3e} exceeded bound at t = {t:.6}")]
    BlowUp { t: f64, norm: f64 },

    #[error("Riccati backward sweep diverged (system not stabilizable)")]
    NotStabilizable,

    #[error("{0}")]
    Other(String),
}
