use thiserror::Error;

pub type Result<T, E = PepsiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PepsiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Zero is not in the convex hull of the score rows.
    #[error("no empirical-likelihood solution: {reason} (offending direction {direction:?})")]
    NoElSolution { reason: String, direction: Vec<f64> },

    #[error(
        "{what} did not converge after {iterations} iterations (residual norm {residual:.3e})"
    )]
    NotConverged {
        what: String,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("singular matrix {name}: {detail}")]
    Singular { name: String, detail: String },

    #[error("negative variance for coefficient {index} ({value:.3e}); sample size is likely too small for this method")]
    NegativeVariance { index: usize, value: f64 },

    #[error("every tuning value failed: {}", format_failures(.0))]
    TuningFailed(Vec<(f64, String)>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn format_failures(failures: &[(f64, String)]) -> String {
    failures
        .iter()
        .map(|(tau, msg)| format!("tau={tau:.4e}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl PepsiError {
    /// True for failures of the numerical procedures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PepsiError::NoElSolution { .. }
                | PepsiError::NotConverged { .. }
                | PepsiError::Singular { .. }
                | PepsiError::NegativeVariance { .. }
                | PepsiError::TuningFailed(_)
        )
    }

    /// Process exit code: 2 for validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else {
            2
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PepsiError::Dimension(_) => "dimension",
            PepsiError::NonFinite(_) => "non_finite",
            PepsiError::InvalidArgument(_) => "invalid_argument",
            PepsiError::Validation(_) => "validation",
            PepsiError::NoElSolution { .. } => "no_el_solution",
            PepsiError::NotConverged { .. } => "not_converged",
            PepsiError::Singular { .. } => "singular",
            PepsiError::NegativeVariance { .. } => "negative_variance",
            PepsiError::TuningFailed(_) => "tuning_failed",
            PepsiError::Io(_) => "io",
            PepsiError::Csv(_) => "csv",
        }
    }
}
