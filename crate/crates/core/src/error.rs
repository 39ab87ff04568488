use crate::gaussian::Key;

/// Errors raised by estimation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("information block is singular; unconstrained keys: {}", fmt_keys(.keys))]
    Unconstrained { keys: Vec<Key> },
    #[error("unknown key {0}")]
    UnknownKey(Key),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("graph is not a chain: {0}")]
    NotAChain(String),
    #[error("timestamps must be strictly increasing (violation at index {index})")]
    NonIncreasingTime { index: usize },
    #[error("time {time} lies outside the estimated span [{start}, {end}]")]
    OutOfSpan { time: f64, start: f64, end: f64 },
    #[error("relative rotation angle {angle} is at or beyond the logarithm's injectivity radius{}", fmt_interval(.interval))]
    InjectivityRadius { angle: f64, interval: Option<(f64, f64)> },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

fn fmt_keys(keys: &[Key]) -> String {
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
}

fn fmt_interval(interval: &Option<(f64, f64)>) -> String {
    match interval {
        Some((a, b)) => format!(" on interval [{a}, {b}]"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::Unconstrained { .. }
                | Error::InjectivityRadius { .. }
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
