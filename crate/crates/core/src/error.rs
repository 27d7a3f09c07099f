use thiserror::Error;

/// Errors produced by the simulator and its analysis tooling.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A cell failed authentication or could not be decoded.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The shared stash could not hold the merged spill.
    #[error("stash overflow: demand {demand} exceeds capacity {capacity}")]
    StashOverflow { demand: usize, capacity: usize },

    /// A table could not be rebuilt within the retry budget.
    #[error("rebuild of level {level} failed after {attempts} attempts")]
    RebuildAborted { level: usize, attempts: usize },

    /// A table build spilled more items than the stash could take.
    #[error("build of level {level} spilled {spilled} items with room for {room}")]
    BuildFailure { level: usize, spilled: usize, room: usize },

    /// Initial construction failed.
    #[error("initialization failed: {0}")]
    Init(String),

    /// An internal consistency check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Not enough samples for a statistical test.
    #[error("not enough data: {0}")]
    NotEnoughData(String),

    /// A regression could not be fitted.
    #[error("fit error: {0}")]
    Fit(String),

    /// A snapshot or trace file was malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
