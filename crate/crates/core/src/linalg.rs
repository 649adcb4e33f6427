//! Small dense linear-algebra helpers shared by the model and risk engines.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{AllocError, Result};

/// Minimum Cholesky pivot accepted as positive definite.
pub const PD_TOL: f64 = 1e-12;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_abs_diff(m, &m.transpose()) <= tol
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Rejects the matrix when any pivot `L[i,i]^2` falls below `pivot_tol`
/// relative to the largest diagonal entry.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        Self::with_tolerance(m, PD_TOL)
    }

    pub fn with_tolerance(m: &DMatrix<f64>, pivot_tol: f64) -> Option<Self> {
        if !m.is_square() {
            return None;
        }
        if m.nrows() == 0 {
            return Cholesky::new(m.clone()).map(|chol| Self { chol });
        }
        let scale = m.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !scale.is_finite() || scale <= 0.0 {
            return None;
        }
        let chol = Cholesky::new(symmetrize(m))?;
        let l = chol.l_dirty();
        let ok = (0..m.nrows()).all(|i| {
            let pivot = l[(i, i)] * l[(i, i)];
            pivot.is_finite() && pivot > pivot_tol * scale
        });
        ok.then_some(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    /// Lower-triangular `L` with `L L' = M`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `v' M^-1 v`.
    pub fn inv_quadratic(&self, v: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let y = l
            .solve_lower_triangular(v)
            .expect("cholesky factor has a nonzero diagonal");
        y.dot(&y)
    }
}

pub fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    SpdFactor::new(m)
        .map(|f| f.inverse())
        .ok_or_else(|| AllocError::NotPositiveDefinite(what.to_string()))
}

/// Whether `v` is within `tol` of an integer.
pub fn near_integer(v: f64, tol: f64) -> bool {
    (v - v.round()).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_quadratic_matches_explicit_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = SpdFactor::new(&m).unwrap();
        let explicit = (v.transpose() * f.inverse() * &v)[(0, 0)];
        assert!((f.inv_quadratic(&v) - explicit).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_and_semidefinite() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdFactor::new(&indefinite).is_none());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdFactor::new(&singular).is_none());
        assert!(SpdFactor::new(&DMatrix::zeros(2, 2)).is_none());
    }
}
