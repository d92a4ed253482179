//! Ultra-low-dimensional prompt tuning at desk scale.
//!
//! Prompt embeddings for a frozen model are expensive to store per task when
//! trained directly (n tokens times the model width d). This crate trains a
//! much smaller object instead: an n-by-r matrix of low-dimensional prompts
//! with r much smaller than d, expanded through a frozen random projection
//! that is never stored, only reseeded, plus a learnable per-dimension scale
//! and shift. The crate bundles:
//!
//! - deterministic numerics (seeded Gaussian streams, dense matrices, rank
//!   checks) where every stream is bit-reproducible across platforms,
//! - the up-projection parameterization and its analytic gradients,
//! - a random-projection distortion lab (required-rank bounds, Monte Carlo
//!   tail estimates, distortion reports),
//! - small training harnesses: an exactly solvable quadratic objective and a
//!   frozen toy transformer classification task,
//! - a binary checkpoint format and a task registry that quantify the
//!   storage savings,
//! - a CLI (`ulpt`) exposing all of the above with reproducible JSON/CSV
//!   output.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod jl;
pub mod numerics;
pub mod registry;
pub mod reparam;
pub mod training;

pub use error::{Result, UlptError};
pub use numerics::{Matrix, Seed, Vector};
