use alloc::string::String;

/// Errors reported by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Arguments violate an operation's preconditions (shapes, ranges, non-finite values).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A metric has no defined value for the given masks (e.g. ASD of an empty mask).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// A checkpoint byte stream could not be decoded.
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    /// A training observer asked to stop.
    #[error("training aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidInput(alloc::format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::invalid!($($arg)*));
        }
    };
}

pub(crate) use ensure;
pub(crate) use invalid;
