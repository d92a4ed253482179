//! Error type shared across the crate.
//!
//! Variants are grouped by how callers are expected to react: configuration
//! problems are caller bugs, dimension/domain errors are bad arguments to a
//! numeric routine, and the checkpoint variants each describe one specific
//! way a stored file can be unusable. The CLI maps these onto distinct
//! process exit codes.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum UlptError {
    /// A configuration value is out of range or inconsistent with the others.
    #[error("invalid config: {0}")]
    Config(String),

    /// Matrix or vector shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Arguments are shaped correctly but outside the routine's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A regression or estimate cannot be formed from the given data.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    /// The parameter budget is too small to admit any rank.
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint bytes do not start with the expected magic.
    #[error("bad checkpoint magic: expected \"ULPT\", got {0:?}")]
    BadMagic([u8; 4]),

    /// Checkpoint format version is one this build does not understand.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),

    /// Checkpoint payload fails its integrity check.
    #[error("checkpoint crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    /// Checkpoint file ends before the declared payload does.
    #[error("truncated checkpoint: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },

    /// Any other malformed artifact (bad mode byte, bad JSON, ...).
    #[error("format error: {0}")]
    Format(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, UlptError>;
