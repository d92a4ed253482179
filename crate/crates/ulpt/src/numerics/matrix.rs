//! Dense row-major matrices and vectors in f64.
//!
//! Deliberately small: the crate works at desk scale (hundreds by hundreds),
//! where a plain triple loop with f64 accumulation is fast enough and easy to
//! audit. Constructors validate shapes and finiteness so that downstream
//! code can assume well-formed values.

use crate::error::{Result, UlptError};
use crate::numerics::rng::{Rng64, Seed};

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(UlptError::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(UlptError::Domain(format!(
                "matrix entries must be finite, got {bad}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Entrywise a - b.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(UlptError::Dimension(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Entrywise a + b.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(UlptError::Dimension(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense vector in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Vector {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Vector {
        Vector {
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Vector> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(UlptError::Domain(format!(
                "vector entries must be finite, got {bad}"
            )));
        }
        Ok(Vector { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Matrix product with f64 accumulation.
///
/// Loop order is i-k-j so the inner loop walks both operand rows
/// contiguously; per-entry accumulation order is still k = 0..a.cols, which
/// keeps results identical to the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(UlptError::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Seeded Gaussian matrix with i.i.d. N(0, variance) entries.
///
/// Entries are drawn row-major from the [`Rng64`] Gaussian stream for the
/// given seed, then scaled by sqrt(variance). Output is bit-identical for
/// the same (seed, shape, variance) on every IEEE 754 platform; see the rng
/// module docs for why.
pub fn gaussian_matrix(seed: Seed, rows: usize, cols: usize, variance: f64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(UlptError::Dimension(format!(
            "gaussian matrix needs positive dimensions, got {rows}x{cols}"
        )));
    }
    if !(variance.is_finite() && variance > 0.0) {
        return Err(UlptError::Domain(format!(
            "gaussian matrix variance must be positive and finite, got {variance}"
        )));
    }
    let std = variance.sqrt();
    let mut rng = Rng64::new(seed);
    let data = (0..rows * cols)
        .map(|_| std * rng.next_gaussian())
        .collect();
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = gaussian_matrix(Seed(4), 6, 6, 1.0).unwrap();
        let c = matmul(&a, &Matrix::identity(6)).unwrap();
        for (x, y) in a.as_slice().iter().zip(c.as_slice()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn matmul_agrees_with_naive_oracle() {
        // Independent oracle: textbook i-j-k loop, written separately.
        fn naive(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows(), b.cols());
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.cols() {
                        acc += a[(i, k)] * b[(k, j)];
                    }
                    out[(i, j)] = acc;
                }
            }
            out
        }
        let a = gaussian_matrix(Seed(10), 7, 5, 1.0).unwrap();
        let b = gaussian_matrix(Seed(11), 5, 9, 1.0).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12, "matmul mismatch: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(matmul(&a, &b), Err(UlptError::Dimension(_))));
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a = gaussian_matrix(Seed(99), 13, 17, 0.25).unwrap();
        let b = gaussian_matrix(Seed(99), 13, 17, 0.25).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = gaussian_matrix(Seed(100), 13, 17, 0.25).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn gaussian_matrix_moments_match_requested_variance() {
        let v = 1.0 / 64.0;
        let m = gaussian_matrix(Seed(7), 1000, 1000, v).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m
            .as_slice()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-3, "sample mean {mean}");
        assert!((var - v).abs() < 1e-3, "sample variance {var} vs {v}");
    }

    #[test]
    fn gaussian_matrix_variance_is_a_pure_rescale() {
        let unit = gaussian_matrix(Seed(21), 5, 8, 1.0).unwrap();
        let quarter = gaussian_matrix(Seed(21), 5, 8, 0.25).unwrap();
        for (a, b) in unit.as_slice().iter().zip(quarter.as_slice()) {
            assert_eq!(0.5 * a, *b);
        }
    }

    #[test]
    fn gaussian_matrix_validates_arguments() {
        assert!(matches!(
            gaussian_matrix(Seed(1), 0, 4, 1.0),
            Err(UlptError::Dimension(_))
        ));
        assert!(matches!(
            gaussian_matrix(Seed(1), 4, 4, 0.0),
            Err(UlptError::Domain(_))
        ));
        assert!(matches!(
            gaussian_matrix(Seed(1), 4, 4, f64::NAN),
            Err(UlptError::Domain(_))
        ));
    }

    #[test]
    fn constructors_reject_non_finite_values() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Vector::from_vec(vec![f64::NAN]).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = gaussian_matrix(Seed(31), 4, 9, 1.0).unwrap();
        let back = a.transposed().transposed();
        assert_eq!(a.as_slice(), back.as_slice());
        assert_eq!(a.transposed().rows(), 9);
    }
}
