//! Descriptive statistics for trained prompts: where the expanded rows sit
//! per embedding dimension, and how similar learned scale/shift vectors
//! are across independent runs.

use serde::Serialize;

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{Matrix, Vector};
use crate::numerics::rng::{Rng64, Seed};

/// Quantile with linear interpolation between order statistics (the common
/// "type 7" convention): at fraction q the value is taken at position
/// q * (len - 1), interpolating between neighbors.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(UlptError::Domain("quantile of an empty sample".to_string()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(UlptError::Domain(format!(
            "quantile fraction must lie in [0, 1], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Distribution of one embedding dimension's values across the prompt
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimensionStats {
    pub dim: usize,
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
    pub min: f64,
    pub max: f64,
}

/// Column statistics of an expanded prompt for the requested dimensions.
pub fn dimension_stats(e_hat: &Matrix, dims: &[usize]) -> Result<Vec<DimensionStats>> {
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        if dim >= e_hat.cols() {
            return Err(UlptError::Dimension(format!(
                "dimension {dim} out of range for width {}",
                e_hat.cols()
            )));
        }
        let column: Vec<f64> = (0..e_hat.rows()).map(|i| e_hat[(i, dim)]).collect();
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        out.push(DimensionStats {
            dim,
            mean,
            p25: quantile(&column, 0.25)?,
            p75: quantile(&column, 0.75)?,
            min: column.iter().cloned().fold(f64::INFINITY, f64::min),
            max: column.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(out)
}

/// Draws k distinct dimension indices below d, deterministically from the
/// seed, returned sorted.
pub fn sample_dims(d: usize, k: usize, seed: Seed) -> Result<Vec<usize>> {
    if k == 0 || k > d {
        return Err(UlptError::Config(format!(
            "cannot sample {k} distinct dimensions from {d}"
        )));
    }
    // Partial Fisher-Yates over the index vector: exact, unbiased, and
    // cheap at these sizes.
    let mut indices: Vec<usize> = (0..d).collect();
    let mut rng = Rng64::new(seed);
    for i in 0..k {
        let j = i + rng.next_below((d - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut picked = indices[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// How much dimensions differ from each other versus how much each
/// dimension varies internally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadSummary {
    /// Standard deviation across dimensions of the per-dimension means.
    pub inter_dim_spread: f64,
    /// Mean across dimensions of the per-dimension standard deviation
    /// over tokens.
    pub mean_intra_dim_spread: f64,
}

/// Spread summary over all columns of an expanded prompt. A prompt that
/// learned a strong per-dimension shift shows inter-dimension spread well
/// above the within-dimension spread.
pub fn spread_summary(e_hat: &Matrix) -> Result<SpreadSummary> {
    if e_hat.rows() == 0 || e_hat.cols() == 0 {
        return Err(UlptError::Dimension(
            "spread summary needs a non-empty matrix".to_string(),
        ));
    }
    let n = e_hat.rows() as f64;
    let mut means = Vec::with_capacity(e_hat.cols());
    let mut intra = Vec::with_capacity(e_hat.cols());
    for j in 0..e_hat.cols() {
        let mut sum = 0.0;
        for i in 0..e_hat.rows() {
            sum += e_hat[(i, j)];
        }
        let mean = sum / n;
        let mut var = 0.0;
        for i in 0..e_hat.rows() {
            var += (e_hat[(i, j)] - mean).powi(2);
        }
        means.push(mean);
        intra.push((var / n).sqrt());
    }
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let inter_var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / means.len() as f64;
    Ok(SpreadSummary {
        inter_dim_spread: inter_var.sqrt(),
        mean_intra_dim_spread: intra.iter().sum::<f64>() / intra.len() as f64,
    })
}

/// Cosine similarity, or None when either vector has zero norm (an
/// all-zero learned shift has no direction to compare).
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(UlptError::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(a.dot(b) / (na * nb)))
}

/// Pairwise cosine similarities between labeled vectors, e.g. the learned
/// scale vectors of independently seeded runs on the same task.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub labels: Vec<String>,
    /// matrix[i][j] = cosine(vectors[i], vectors[j]); None where a vector
    /// had zero norm.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean over the strict upper triangle, skipping None entries; None if
    /// nothing was comparable.
    pub mean_off_diagonal: Option<f64>,
}

pub fn alignment_report(labels: Vec<String>, vectors: &[Vector]) -> Result<AlignmentReport> {
    if labels.len() != vectors.len() {
        return Err(UlptError::Dimension(format!(
            "{} labels for {} vectors",
            labels.len(),
            vectors.len()
        )));
    }
    if vectors.len() < 2 {
        return Err(UlptError::Config(
            "alignment needs at least two vectors".to_string(),
        ));
    }
    let k = vectors.len();
    let mut matrix = vec![vec![None; k]; k];
    let mut off_sum = 0.0;
    let mut off_count = 0usize;
    for i in 0..k {
        for j in 0..k {
            let value = cosine_similarity(&vectors[i], &vectors[j])?;
            matrix[i][j] = value;
            if j > i {
                if let Some(v) = value {
                    off_sum += v;
                    off_count += 1;
                }
            }
        }
    }
    Ok(AlignmentReport {
        labels,
        matrix,
        mean_off_diagonal: (off_count > 0).then(|| off_sum / off_count as f64),
    })
}
