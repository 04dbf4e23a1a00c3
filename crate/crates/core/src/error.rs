use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvadError>;

#[derive(Debug, Error)]
pub enum EvadError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "pruning infeasible: floor(N*rho) = {kept} must exceed the keyframe token count \
         (N = {n}, N1 = {n_key}, rho = {rho})"
    )]
    Feasibility {
        n: usize,
        n_key: usize,
        rho: f64,
        kept: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EvadError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        EvadError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
