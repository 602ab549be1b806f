use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("operator is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("trace is {0}, expected 1")]
    Trace(f64),
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("unknown register '{0}'")]
    UnknownRegister(String),
    #[error("smoothing parameter must lie in [0, 1), got {0}")]
    BadEps(f64),
    #[error("invalid POVM: {0}")]
    InvalidPovm(String),
    #[error("no qualifying k: {0}")]
    NoGoodK(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::BadEps(eps))
    }
}
