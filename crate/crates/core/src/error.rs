use alloc::string::String;
use core::fmt;

/// Error taxonomy shared by every module in the core.
///
/// The variants mirror the failure classes the operations distinguish:
/// bad configuration, malformed input, calls out of lifecycle order,
/// non-finite numerics, missing or inconsistent data, and checkpoint
/// persistence problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Structurally invalid configuration (shape chains, ranges, counts).
    Config(String),
    /// Input values or shapes that do not satisfy an operation's contract.
    Input(String),
    /// Operation invoked out of order (e.g. backward without a cached forward).
    State(String),
    /// Non-finite value produced where the contract requires finiteness.
    Numeric(String),
    /// Dataset-level inconsistency (missing class, unpaired entry, ...).
    Data(String),
    /// Checkpoint decode failure: bad magic, version, digest, truncation.
    Persistence(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Input(m) => write!(f, "input error: {m}"),
            CoreError::State(m) => write!(f, "state error: {m}"),
            CoreError::Numeric(m) => write!(f, "numeric error: {m}"),
            CoreError::Data(m) => write!(f, "data error: {m}"),
            CoreError::Persistence(m) => write!(f, "persistence error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
