use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("{what}: outside regime at {} node(s), first at {:?}", nodes.len(), nodes.first())]
    Regime { what: String, nodes: Vec<usize> },

    #[error("{what} did not converge after {iterations} iterations (last residual {:e})", residuals.last().copied().unwrap_or(f64::NAN))]
    Convergence {
        what: String,
        iterations: usize,
        residuals: Vec<f64>,
        /// Last iterate, when the solver has one worth returning.
        last: Option<Vec<f64>>,
    },

    #[error("step rejected: {reason}; retry with dt <= {suggested_dt:e}")]
    StepRejected { reason: String, suggested_dt: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn regime(what: impl Into<String>, nodes: Vec<usize>) -> Self {
        Error::Regime { what: what.into(), nodes }
    }

    /// True for errors that signal an iterative solver or stepper failing
    /// rather than bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Convergence { .. } | Error::StepRejected { .. } | Error::Numerical(_))
    }
}
