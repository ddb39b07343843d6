use thiserror::Error;

/// Crate-wide error type.
///
/// Variants follow the failure families of the public surface: configuration
/// problems (bad graphs, bad configs, shape mismatches), data problems
/// (malformed files, out-of-range labels), state problems (calls out of
/// order) and numeric faults (non-finite values).
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value produced by node '{node}' during {phase}")]
    NonFinite { node: String, phase: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
