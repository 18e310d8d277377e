use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("polar form is undefined at zero magnitude")]
    PolarSingular,

    #[error("topology error: {0}")]
    Topology(String),

    #[error("non-finite state at t = {time} s (inverter {inverter}, |v| = {magnitude})")]
    NonFinite {
        time: f64,
        inverter: String,
        magnitude: f64,
    },

    #[error("{} scenario error(s): {}", .0.len(), .0.join("; "))]
    Schema(Vec<String>),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numeric failures as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Analysis(_))
    }
}
