use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("point {index} lies outside the dictionary domain: {detail}")]
    Domain { index: usize, detail: String },

    #[error("unsupported dictionary: {0}")]
    UnsupportedDictionary(String),

    #[error("dictionary not closed under the required products: {0}")]
    Closure(String),

    #[error("integration diverged at step {step}")]
    Integration { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix logarithm undefined: eigenvalue {re} + {im}i lies on the closed negative real axis")]
    LogBranch { re: f64, im: f64 },

    #[error("identification quality: {0}")]
    Quality(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
