use std::fmt;

/// Errors surfaced by simulation, identification, and configuration.
#[derive(Debug)]
pub enum Error {
    /// A precondition on constructor or operation arguments was violated.
    Domain(String),
    /// A state component became non-finite during integration.
    NonFiniteState { t: f64 },
    /// The adaptive stepper could not meet tolerances at the minimum step.
    StepFailure { t: f64, h: f64 },
    /// The exact update's constraint set is empty beyond tolerance
    /// (noise or model error; switch to the regularized update).
    InfeasibleConstraint { residual: f64, tol: f64 },
    /// An iterative solver exhausted its iteration budget.
    NonConvergence { iters: usize },
    /// Richardson disagreement of the quadrature oracle exceeds the
    /// requested tolerance; refine the grid.
    GridTooCoarse { disagreement: f64, tol: f64 },
    /// A failure attributed to a specific event of the hybrid loop.
    AtEvent { index: usize, source: Box<Error> },
    /// Scenario file could not be parsed.
    Parse(String),
    /// Scenario contents violate an invariant.
    Validation(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NonFiniteState { t } => {
                write!(f, "non-finite state at t = {t} (integrator blow-up)")
            }
            Error::StepFailure { t, h } => {
                write!(f, "step failure at t = {t}: cannot meet tolerances (h = {h})")
            }
            Error::InfeasibleConstraint { residual, tol } => write!(
                f,
                "exact update infeasible: constraint residual {residual:.3e} exceeds {tol:.3e}"
            ),
            Error::NonConvergence { iters } => {
                write!(f, "solver did not converge within {iters} iterations")
            }
            Error::GridTooCoarse { disagreement, tol } => write!(
                f,
                "quadrature grid too coarse: Richardson disagreement {disagreement:.3e} > {tol:.3e}"
            ),
            Error::AtEvent { index, source } => write!(f, "at event {index}: {source}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::AtEvent { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
