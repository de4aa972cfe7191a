//! Error type shared by every module of the crate.

use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions or invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN/Inf showed up where a finite number is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// All rewards in a group are equal, so normalized advantages are undefined.
    #[error("degenerate group: all {group_size} rewards equal {reward}")]
    DegenerateGroup { group_size: usize, reward: f64 },

    /// Dynamic sampling could not fill the batch with mixed-outcome groups.
    #[error(
        "zero signal: {accepted}/{needed} mixed groups after sampling {sampled} groups \
         ({all_success} all-success, {all_fail} all-fail)"
    )]
    ZeroSignal {
        needed: usize,
        accepted: usize,
        sampled: usize,
        all_success: usize,
        all_fail: usize,
    },

    /// The scripted expert could not solve a scenario within the budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed dataset content (bad token, demo that does not replay).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Numeric(_) => "numeric",
            Error::DegenerateGroup { .. } => "degenerate_group",
            Error::ZeroSignal { .. } => "zero_signal",
            Error::Generation(_) => "generation",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
