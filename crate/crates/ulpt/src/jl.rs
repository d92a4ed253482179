//! Random-projection distortion lab.
//!
//! Low-dimensional prompts work because random projections nearly preserve
//! geometry: for a projection with i.i.d. N(0, 1/r) entries, squared lengths
//! are preserved in expectation, and the probability that a fixed vector's
//! length is distorted by more than a factor (1 +/- eps) decays like
//! 2 exp(-eps^2 r / c) for a modest constant c. This module makes those
//! statements checkable at desk scale: a closed-form required-rank bound,
//! empirical distortion reports over point sets, Monte Carlo tail estimates,
//! and a regression that recovers the decay constant from measured tails.

use crate::error::{Result, UlptError};
use crate::numerics::matrix::{matmul, Matrix};
use crate::numerics::rng::{Rng64, Seed};
use crate::reparam::ProjectionMatrix;
use serde::Serialize;

/// Inputs to the required-rank bound: preserve all pairwise geometry of n
/// points within relative distortion epsilon, with failure probability at
/// most delta, under tail constant c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JlQuery {
    pub epsilon: f64,
    pub delta: f64,
    pub n: usize,
    pub c: f64,
}

impl JlQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(UlptError::Config(format!(
                "epsilon must lie in (0, 0.5], got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(UlptError::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.n == 0 {
            return Err(UlptError::Config("n must be at least 1".to_string()));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(UlptError::Config(format!(
                "tail constant c must be positive and finite, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

/// Smallest rank the tail bound certifies:
/// r = ceil(2 c eps^-2 ln(2n / delta)).
pub fn required_rank(query: &JlQuery) -> Result<usize> {
    query.validate()?;
    let raw = 2.0 * query.c * query.epsilon.powi(-2) * (2.0 * query.n as f64 / query.delta).ln();
    Ok(raw.ceil() as usize)
}

/// Empirical pairwise distortion of a point set under a projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistortionReport {
    /// Pairs with nonzero original distance that entered the statistics.
    pub pair_count: usize,
    /// Coincident pairs that were skipped.
    pub zero_distance_pairs: usize,
    pub max_distortion: f64,
    pub mean_distortion: f64,
    /// Fraction of counted pairs with distortion >= epsilon.
    pub violation_fraction: f64,
}

/// Projects each point and reports |  ||z_i - z_j|| - ||e_i - e_j||  | /
/// ||e_i - e_j|| over all pairs.
///
/// The projection is applied raw (no scale or shift): pass an N(0, 1/r)
/// projection to measure real distortions, or the identity hook to sanity-check
/// that distortions vanish when nothing is projected away.
pub fn distortion_report(
    points: &Matrix,
    proj: &ProjectionMatrix,
    epsilon: f64,
) -> Result<DistortionReport> {
    if points.rows() < 2 {
        return Err(UlptError::Domain(format!(
            "need at least 2 points for pairwise distortion, got {}",
            points.rows()
        )));
    }
    if proj.matrix.cols() != points.cols() {
        return Err(UlptError::Dimension(format!(
            "projection width {} does not match point width {}",
            proj.matrix.cols(),
            points.cols()
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(UlptError::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    // z_i = p e_i for every point, i.e. Z = E p^T.
    let projected = matmul(points, &proj.matrix.transposed())?;

    let mut pair_count = 0usize;
    let mut zero_distance_pairs = 0usize;
    let mut max_distortion: f64 = 0.0;
    let mut sum_distortion = 0.0;
    let mut violations = 0usize;
    let n = points.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let orig = distance(points.row(i), points.row(j));
            if orig == 0.0 {
                zero_distance_pairs += 1;
                continue;
            }
            let proj_dist = distance(projected.row(i), projected.row(j));
            let distortion = (proj_dist - orig).abs() / orig;
            pair_count += 1;
            sum_distortion += distortion;
            max_distortion = max_distortion.max(distortion);
            if distortion >= epsilon {
                violations += 1;
            }
        }
    }
    if pair_count == 0 {
        return Err(UlptError::Domain(
            "all point pairs coincide; distortion is undefined".to_string(),
        ));
    }
    Ok(DistortionReport {
        pair_count,
        zero_distance_pairs,
        max_distortion,
        mean_distortion: sum_distortion / pair_count as f64,
        violation_fraction: violations as f64 / pair_count as f64,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Monte Carlo estimate of the single-vector tail probability
/// Pr( | ||A x|| / sqrt(r) - ||x|| | >= eps ||x|| ) for a fixed unit vector
/// x and A an r-by-d matrix with i.i.d. standard Gaussian entries.
///
/// By rotational invariance the law of ||A x|| for unit x is the chi
/// distribution with r degrees of freedom regardless of d or of which unit
/// vector is chosen, so the implementation takes x = e1 and draws only the
/// r entries of A that act on it. `d` is validated and carried for
/// reporting; it does not change the estimate's distribution. Each trial
/// derives its own sub-seed, so the estimate is reproducible and trials
/// could be evaluated in any order.
pub fn tail_estimate(d: usize, r: usize, epsilon: f64, trials: usize, seed: Seed) -> Result<f64> {
    if d == 0 || r == 0 {
        return Err(UlptError::Config(format!(
            "dimensions must be positive, got d={d} r={r}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(UlptError::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    if trials < 1000 {
        return Err(UlptError::Domain(format!(
            "need at least 1000 trials for a usable estimate, got {trials}"
        )));
    }
    let sqrt_r = (r as f64).sqrt();
    let mut hits = 0usize;
    for trial in 0..trials {
        let mut rng = Rng64::new(seed.derive(trial as u64));
        let mut sum_sq = 0.0;
        for _ in 0..r {
            let g = rng.next_gaussian();
            sum_sq += g * g;
        }
        let stat = (sum_sq.sqrt() / sqrt_r - 1.0).abs();
        if stat >= epsilon {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Recovers the decay constant c from measured tails, assuming the model
/// tail(r) = 2 exp(-eps^2 r / c): least-squares slope m of -ln(tail)
/// against r, then c = eps^2 / m.
///
/// Tails at exactly 0 or 1 carry no slope information (log of 0, or an
/// event that never misses) and are rejected, as are tails that fail to
/// decay (slope <= 0), which the model cannot represent with c > 0.
pub fn fit_c_from_tails(epsilon: f64, ranks: &[usize], tails: &[f64]) -> Result<f64> {
    if ranks.len() < 3 {
        return Err(UlptError::Config(format!(
            "need at least 3 ranks to fit a slope, got {}",
            ranks.len()
        )));
    }
    if ranks.len() != tails.len() {
        return Err(UlptError::Dimension(format!(
            "{} ranks but {} tails",
            ranks.len(),
            tails.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &r in ranks {
        if r == 0 {
            return Err(UlptError::Config("ranks must be positive".to_string()));
        }
        if !seen.insert(r) {
            return Err(UlptError::Config(format!("duplicate rank {r}")));
        }
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(UlptError::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    for &t in tails {
        if !(t > 0.0 && t < 1.0) {
            return Err(UlptError::DegenerateFit(format!(
                "tail estimate {t} is outside (0, 1); more trials or smaller ranks needed"
            )));
        }
    }
    let xs: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let ys: Vec<f64> = tails.iter().map(|&t| -t.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - x_mean) * (y - y_mean);
        den += (x - x_mean) * (x - x_mean);
    }
    let slope = num / den;
    if !(slope.is_finite() && slope > 0.0) {
        return Err(UlptError::DegenerateFit(format!(
            "tails do not decay with rank (slope {slope}); cannot fit c > 0"
        )));
    }
    Ok(epsilon * epsilon / slope)
}

/// Monte Carlo version of [`fit_c_from_tails`]: estimates the tail at each
/// rank (one derived sub-seed per rank) and inverts the model.
pub fn fit_c(
    d: usize,
    epsilon: f64,
    ranks: &[usize],
    trials: usize,
    seed: Seed,
) -> Result<(f64, Vec<f64>)> {
    let mut tails = Vec::with_capacity(ranks.len());
    for (i, &r) in ranks.iter().enumerate() {
        tails.push(tail_estimate(d, r, epsilon, trials, seed.derive(i as u64))?);
    }
    let c = fit_c_from_tails(epsilon, ranks, &tails)?;
    Ok((c, tails))
}
