use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("jacobian is numerically singular (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("straight-line family is not a diffeotopy: displacement jacobian bound {bound} (need < {limit})")]
    NotDiffeotopy { bound: f64, limit: f64 },

    #[error("endpoint mismatch in {what}: discrepancy {discrepancy:e}")]
    EndpointMismatch { what: String, discrepancy: f64 },

    #[error("unsupported map form: {0}")]
    UnsupportedForm(String),

    #[error("tangent vector is not vertical (dt-component {0})")]
    NotVertical(f64),

    #[error("measured translation {value} is not an integer")]
    NonIntegral { value: f64 },

    #[error("preimage enumeration found {found} points, expected {expected}")]
    MissingPreimage { expected: usize, found: usize },

    #[error("preimage enumeration produced coincident points (separation {separation:e})")]
    DuplicatePreimage { separation: f64 },

    #[error("no k <= {cap} satisfies the fiber expansion inequality")]
    Unbounded { cap: u32 },

    #[error("finsler norm is degenerate: K = {0}")]
    FinslerDegenerate(f64),

    #[error("adapted metric is not expanding: lambda_a = {0}")]
    NotExpanding(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::NotDiffeotopy { .. } | Error::DimensionMismatch { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
