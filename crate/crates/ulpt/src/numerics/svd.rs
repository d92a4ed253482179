//! Singular values, numerical rank, and spectral extremes.
//!
//! Uses one-sided Jacobi (Hestenes) orthogonalization: rotate pairs of
//! columns until they are mutually orthogonal; the singular values are then
//! the column norms. At desk scale this is simple, robust, and accurate to
//! close to machine precision, which is all the rank checks here need. The
//! matrix is processed in its taller orientation so sweeps run over the
//! smaller dimension.

use crate::error::{Result, UlptError};
use crate::numerics::matrix::Matrix;

/// Relative tolerance used by default when deciding numerical rank: singular
/// values at or below `tol * sigma_max` count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Numerical rank plus the smallest and largest singular values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSummary {
    pub rank: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// All min(rows, cols) singular values, sorted descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let tall = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transposed()
    };
    let rows = tall.rows();
    let n = tall.cols();
    if n == 0 || rows == 0 {
        return Vec::new();
    }
    // Work on contiguous columns.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| tall[(i, j)]).collect())
        .collect();

    const ORTHO_TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let x = cols[p][i];
                    let y = cols[q][i];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                // Smaller-angle root of t^2 + 2*zeta*t - 1 = 0. For huge zeta
                // the formula underflows to t = 0, a harmless no-op rotation.
                let t = if zeta.is_finite() {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                } else {
                    0.0
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                if s == 0.0 {
                    continue;
                }
                rotated = true;
                for i in 0..rows {
                    let x = cols[p][i];
                    let y = cols[q][i];
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    sv
}

/// Numerical rank and spectral extremes under a relative tolerance.
///
/// Rank counts singular values strictly above `tol * sigma_max`; the zero
/// matrix therefore has rank 0. `sigma_min` is the smallest of the
/// min(rows, cols) singular values, zeros included.
pub fn rank_and_spectral_extremes(m: &Matrix, tol: f64) -> Result<SpectralSummary> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(UlptError::Dimension(
            "rank of an empty matrix is undefined".to_string(),
        ));
    }
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(UlptError::Domain(format!(
            "rank tolerance must be finite and non-negative, got {tol}"
        )));
    }
    let sv = singular_values(m);
    let sigma_max = sv[0];
    let sigma_min = *sv.last().expect("at least one singular value");
    let rank = sv.iter().filter(|&&s| s > tol * sigma_max).count();
    Ok(SpectralSummary {
        rank,
        sigma_min,
        sigma_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::gaussian_matrix;
    use crate::numerics::rng::Seed;

    #[test]
    fn identity_has_unit_spectrum() {
        let s = rank_and_spectral_extremes(&Matrix::identity(4), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank, 4);
        assert!((s.sigma_min - 1.0).abs() < 1e-14);
        assert!((s.sigma_max - 1.0).abs() < 1e-14);
    }

    #[test]
    fn duplicated_row_drops_rank() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let s = rank_and_spectral_extremes(&m, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank, 1);
        // Rank-one matrix: sigma_max^2 equals the squared Frobenius norm (10).
        assert!((s.sigma_max - 10f64.sqrt()).abs() < 1e-12);
        assert!(s.sigma_min.abs() < 1e-12);
    }

    #[test]
    fn known_two_by_two_spectrum() {
        // A = [[3,0],[4,5]]; A^T A = [[25,20],[20,25]] has eigenvalues 45 and
        // 5 (by hand: trace 50, det 225), so the singular values are sqrt(45)
        // and sqrt(5).
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let sv = singular_values(&m);
        assert!((sv[0] - 45f64.sqrt()).abs() < 1e-12, "sigma1 {}", sv[0]);
        assert!((sv[1] - 5f64.sqrt()).abs() < 1e-12, "sigma2 {}", sv[1]);
    }

    #[test]
    fn rectangular_diagonal_spectrum() {
        let mut m = Matrix::zeros(3, 5);
        m[(0, 0)] = 5.0;
        m[(1, 1)] = 3.0;
        m[(2, 2)] = 1.0;
        let sv = singular_values(&m);
        assert_eq!(sv.len(), 3);
        assert!((sv[0] - 5.0).abs() < 1e-13);
        assert!((sv[1] - 3.0).abs() < 1e-13);
        assert!((sv[2] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn transpose_preserves_spectrum() {
        let m = gaussian_matrix(Seed(8), 6, 11, 1.0).unwrap();
        let a = singular_values(&m);
        let b = singular_values(&m.transposed());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * a[0].max(1.0));
        }
    }

    #[test]
    fn wide_gaussian_is_full_rank() {
        let m = gaussian_matrix(Seed(3), 8, 64, 1.0 / 8.0).unwrap();
        let s = rank_and_spectral_extremes(&m, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank, 8);
        assert!(s.sigma_min > 0.0);
    }

    #[test]
    fn full_rank_across_many_seeds() {
        for seed in 0..100 {
            let m = gaussian_matrix(Seed(seed), 4, 32, 0.25).unwrap();
            let s = rank_and_spectral_extremes(&m, DEFAULT_RANK_TOL).unwrap();
            assert_eq!(s.rank, 4, "seed {seed} lost rank");
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let s = rank_and_spectral_extremes(&Matrix::zeros(3, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank, 0);
        assert_eq!(s.sigma_max, 0.0);
        assert_eq!(s.sigma_min, 0.0);
    }

    #[test]
    fn rejects_empty_matrix_and_bad_tolerance() {
        assert!(rank_and_spectral_extremes(&Matrix::zeros(0, 3), DEFAULT_RANK_TOL).is_err());
        assert!(rank_and_spectral_extremes(&Matrix::identity(2), -1.0).is_err());
        assert!(rank_and_spectral_extremes(&Matrix::identity(2), f64::NAN).is_err());
    }
}
