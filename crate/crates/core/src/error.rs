use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Standing assumptions that can be checked numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    /// det(F1, F2, F01, F02) != 0.
    A1,
    /// The initial fiber meets the stable stratum transversally.
    A2,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assumption::A1 => write!(f, "A1"),
            Assumption::A2 => write!(f, "A2"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("evaluation of {what} produced a non-finite value")]
    Evaluation { what: &'static str },

    #[error("state dimension must be {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("assumption ({assumption}) violated: measured {value:e}")]
    AssumptionViolated { assumption: Assumption, value: f64 },

    #[error("control undefined on the switching surface (rho = {rho:e})")]
    SingularControl { rho: f64 },

    #[error("contact point lies in Sigma+ (h01^2 + h02^2 - h12^2 = {margin:e})")]
    SigmaPlusEncounter { margin: f64 },

    #[error("non-transversal crossing of the switching surface (speed {speed:e})")]
    NonTransversalCrossing { speed: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}, minimal rho = {rho_min:e})")]
    StepSizeUnderflow { t: f64, h: f64, rho_min: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },

    #[error("Newton iteration failed after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("shooting Jacobian is singular (condition number {cond:e})")]
    SingularJacobian { cond: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
