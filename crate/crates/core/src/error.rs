use thiserror::Error;

use crate::amp::TraceRow;
use crate::model::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not parse family spec `{spec}`: {reason}")]
    FamilySpec { spec: String, reason: String },

    #[error("Newton solver exceeded {iterations} iterations (best |grad|_inf = {grad_inf_norm:e})")]
    MaxIterExceeded {
        iterations: usize,
        grad_inf_norm: f64,
        best: Box<FitResult>,
    },

    #[error("Hessian is not positive definite; curvature precondition violated")]
    SingularHessian,

    #[error("leave-one-out refit failed at observation {index}: {source}")]
    LooFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("leverage H[{index}] = {value} is outside [0, 1 - 1e-8)")]
    LeverageOutOfRange { index: usize, value: f64 },

    #[error("loss curvature at residual {index} is {value:e}, below 1e-12")]
    ZeroCurvature { index: usize, value: f64 },

    #[error("no sign change found while bracketing {0}")]
    BracketFailure(&'static str),

    #[error("calibration routes disagree: tau from bisection {direct}, tau from theta {via_theta}")]
    CalibrationMismatch { direct: f64, via_theta: f64 },

    #[error("mean Onsager derivative {0:e} is not above 1e-12")]
    DegenerateOnsager(f64),

    #[error("no sign change found while solving for theta_t")]
    ThetaBracketFailure,

    #[error("AMP did not converge within {} iterations", trace.len())]
    NonConvergence { trace: Vec<TraceRow> },

    #[error("{failed} of {total} experiment cells failed; first failure: {first}")]
    ExperimentFailed { failed: usize, total: usize, first: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::MaxIterExceeded { .. }
                | Error::SingularHessian
                | Error::LooFailed { .. }
                | Error::LeverageOutOfRange { .. }
                | Error::ZeroCurvature { .. }
                | Error::BracketFailure(_)
                | Error::CalibrationMismatch { .. }
                | Error::DegenerateOnsager(_)
                | Error::ThetaBracketFailure
                | Error::NonConvergence { .. }
                | Error::ExperimentFailed { .. }
                | Error::NonFinite(_)
        )
    }
}
