//! Direct-inversion risk: `A (V0^-1 + Z'Z)^-1 A' E[sigma^2]`.
//!
//! This is the reference the closed-form engines are checked against. It
//! shares nothing with [`crate::risk`] beyond the design matrix, and uses its
//! own LDL' factorization instead of the Cholesky routine the formulas use.

use nalgebra::{DMatrix, DVector};

use crate::error::{AllocError, Result};
use crate::model::{build_design, Allocation, CovariateMatrix, NigPrior};

/// Relative pivot threshold for the LDL' factorization.
const PIVOT_TOL: f64 = 1e-13;

/// `M = L D L'` with unit lower-triangular `L`.
struct Ldl {
    l: DMatrix<f64>,
    d: Vec<f64>,
}

impl Ldl {
    fn factor(m: &DMatrix<f64>) -> Option<Self> {
        let k = m.nrows();
        let scale = (0..k).fold(0.0_f64, |acc, i| acc.max(m[(i, i)].abs()));
        if k > 0 && !(scale > 0.0) {
            return None;
        }
        let mut l = DMatrix::identity(k, k);
        let mut d = vec![0.0; k];
        for j in 0..k {
            let mut dj = m[(j, j)];
            for t in 0..j {
                dj -= l[(j, t)] * l[(j, t)] * d[t];
            }
            if !(dj > PIVOT_TOL * scale) {
                return None;
            }
            d[j] = dj;
            for i in j + 1..k {
                let mut v = m[(i, j)];
                for t in 0..j {
                    v -= l[(i, t)] * l[(j, t)] * d[t];
                }
                l[(i, j)] = v / dj;
            }
        }
        Some(Self { l, d })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let k = b.len();
        let mut y = b.clone();
        for i in 0..k {
            for t in 0..i {
                y[i] -= self.l[(i, t)] * y[t];
            }
        }
        for i in 0..k {
            y[i] /= self.d[i];
        }
        for i in (0..k).rev() {
            for t in i + 1..k {
                y[i] -= self.l[(t, i)] * y[t];
            }
        }
        y
    }
}

/// Contrast variance `A V1 A'` where `V1 = (precision + Z'Z)^-1`.
pub fn contrast_variance(precision: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
    let mut p1 = precision + z.transpose() * z;
    p1 = (&p1 + p1.transpose()) * 0.5;
    let ldl = Ldl::factor(&p1)
        .ok_or_else(|| AllocError::SingularSystem("V0^-1 + Z'Z is not positive definite".into()))?;
    let mut contrast = DVector::zeros(p1.nrows());
    contrast[0] = -1.0;
    contrast[1] = 1.0;
    Ok(contrast.dot(&ldl.solve(&contrast)))
}

/// `V0^-1` assembled without the Cholesky route the formulas take.
fn prior_precision(prior: &NigPrior) -> Result<DMatrix<f64>> {
    use crate::model::PriorCovariance;
    let k = prior.p() + 2;
    match prior.covariance() {
        PriorCovariance::Flat => Ok(DMatrix::zeros(k, k)),
        PriorCovariance::Proper(v0) => {
            let ldl = Ldl::factor(v0)
                .ok_or_else(|| AllocError::NotPositiveDefinite("V0".into()))?;
            let mut inv = DMatrix::zeros(k, k);
            for j in 0..k {
                let mut e = DVector::zeros(k);
                e[j] = 1.0;
                inv.set_column(j, &ldl.solve(&e));
            }
            Ok((&inv + inv.transpose()) * 0.5)
        }
    }
}

/// Bayes risk of `alloc` by explicit inversion of the posterior precision,
/// scaled by the prior `E[sigma^2]`.
pub fn risk_direct(prior: &NigPrior, x: &CovariateMatrix, alloc: &Allocation) -> Result<f64> {
    risk_direct_scaled(prior, x, alloc, prior.expected_sigma2())
}

pub fn risk_direct_scaled(
    prior: &NigPrior,
    x: &CovariateMatrix,
    alloc: &Allocation,
    e_sigma2: f64,
) -> Result<f64> {
    if prior.p() != x.p() {
        return Err(AllocError::DimensionMismatch(format!(
            "prior has p = {} but X has p = {}",
            prior.p(),
            x.p()
        )));
    }
    let z = build_design(x, alloc)?;
    Ok(contrast_variance(&prior_precision(prior)?, &z)? * e_sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ldl_solves() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = Ldl::factor(&m).unwrap().solve(&b);
        assert!((&m * x - b).amax() < 1e-14);
        assert!(Ldl::factor(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).is_none());
    }

    #[test]
    fn empty_sample_returns_prior_contrast() {
        let v0 = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.1, 0.0, 3.0, 0.2, 0.1, 0.2, 1.0]);
        let prior = NigPrior::new(DVector::zeros(3), v0, 3.0, 1.0).unwrap();
        let x = CovariateMatrix::empty(1).unwrap();
        let r = risk_direct(&prior, &x, &Allocation::all_control(0)).unwrap();
        assert!((r - (2.0 + 3.0) * 0.5).abs() < 1e-14);
    }

    #[test]
    fn flat_with_too_few_units_is_singular() {
        let prior = NigPrior::flat(2, 2.0, 1.0).unwrap();
        let x = CovariateMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.5], vec![2.0, 2.0]]).unwrap();
        let err = risk_direct(&prior, &x, &Allocation::new(vec![0, 1, 1]).unwrap()).unwrap_err();
        assert_eq!(err.code(), "SingularSystem");
    }
}
