use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("price must be positive, got {0}")]
    PriceDomain(f64),

    #[error("quantity must be non-negative, got {0}")]
    NegativeQuantity(f64),

    #[error("seller {index} supplies {supply} pu above its capacity {capacity} pu")]
    CapacityViolation {
        index: usize,
        supply: f64,
        capacity: f64,
    },

    /// `p_k + Σs ≤ 0`: nothing to sell the buyers at any positive price.
    #[error("no positive tradable volume (p_k + Σs = {0})")]
    StalledMarket(f64),

    #[error("invalid node index {0}")]
    InvalidNode(usize),

    /// The feasible region does not contain the origin, or has no interior.
    #[error("infeasible configuration: {0}")]
    InfeasibleRegion(String),

    #[error("solver did not converge after {iterations} iterations: {reason} (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        reason: String,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
