use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("density ratio overflows at x = {x:?} (log value {log_value})")]
    Range { x: Vec<f64>, log_value: f64 },

    #[error("unsupported target family: {0}")]
    Capability(String),

    #[error("non-positive semigroup value {value} at x = {x:?}, t = {t}")]
    Numeric { x: Vec<f64>, t: f64, value: f64 },

    #[error("point cloud radius bound not met after {attempts} attempts")]
    ImprobableEvent { attempts: usize },

    #[error("non-finite state in particle {particle} at step {step}")]
    Divergence { particle: usize, step: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
