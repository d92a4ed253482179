//! Deterministic numeric kernel: seeded randomness, dense matrices, and
//! singular-value based rank checks. Everything else in the crate builds on
//! these primitives.

pub mod matrix;
pub mod rng;
pub mod svd;

pub use matrix::{gaussian_matrix, matmul, Matrix, Vector};
pub use rng::{ln_deterministic, Rng64, Seed, SplitMix64};
pub use svd::{rank_and_spectral_extremes, singular_values, SpectralSummary, DEFAULT_RANK_TOL};
