use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(
        "gradient-code construction failed after {attempts} attempts (last residual {residual:e})"
    )]
    ConstructionFailed { attempts: usize, residual: f64 },

    #[error("invalid quantizer config: {0}")]
    InvalidConfig(String),

    #[error("knob index {index} out of range for {bits}-bit quantizer")]
    IndexOutOfRange { index: u32, bits: u32 },

    #[error("malformed payload: {0}")]
    MalformedPayload(String),

    #[error("client shard is empty")]
    EmptyShard,

    #[error("infeasible label skew: {0}")]
    InfeasibleSkew(String),

    #[error("scheme expects {expected} clients, got {got}")]
    SchemeMismatch { expected: usize, got: usize },

    #[error("no successful round after {wall_rounds} wall rounds (budget T = {budget})")]
    NonTermination { wall_rounds: usize, budget: usize },

    #[error("series denominator {denominator} below {floor} at R = 1; learning rate too large")]
    DenominatorViolation { denominator: f64, floor: f64 },

    #[error("truncated tail mass {tail_mass:e} exceeds {limit:e} (R_max = {r_max})")]
    TailTooHeavy {
        tail_mass: f64,
        limit: f64,
        r_max: u64,
    },

    #[error("expected H1 coefficient is non-positive ({0})")]
    NonPositiveH1(f64),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed IDX file {path}: {message}")]
    Idx { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
