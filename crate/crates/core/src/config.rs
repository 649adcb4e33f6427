//! Serializable prior specifications.
//!
//! A prior is given in exactly one of four forms: flat, the `V0` blocks
//! `(nu, rho, gamma)`, the full `V0`, or the decomposition `(h1, h2, B, D)`.
//! `zeta0` defaults to zeros and `(a0, b0)` to `(2, 1)`, i.e. `E[sigma^2] = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AllocError, Result};
use crate::model::{NigPrior, PriorCovariance, PriorDecomposition};

pub const DEFAULT_A0: f64 = 2.0;
pub const DEFAULT_B0: f64 = 1.0;

fn default_a0() -> f64 {
    DEFAULT_A0
}

fn default_b0() -> f64 {
    DEFAULT_B0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Flat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zeta0: Option<Vec<f64>>,
        #[serde(default = "default_a0")]
        a0: f64,
        #[serde(default = "default_b0")]
        b0: f64,
    },
    Blocks {
        nu: Vec<Vec<f64>>,
        rho: Vec<Vec<f64>>,
        gamma: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zeta0: Option<Vec<f64>>,
        #[serde(default = "default_a0")]
        a0: f64,
        #[serde(default = "default_b0")]
        b0: f64,
    },
    Covariance {
        v0: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zeta0: Option<Vec<f64>>,
        #[serde(default = "default_a0")]
        a0: f64,
        #[serde(default = "default_b0")]
        b0: f64,
    },
    Decomposition {
        h1: f64,
        h2: f64,
        b_rows: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zeta0: Option<Vec<f64>>,
        #[serde(default = "default_a0")]
        a0: f64,
        #[serde(default = "default_b0")]
        b0: f64,
    },
}

pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(AllocError::DimensionMismatch(format!(
            "{what} must be {nrows}x{ncols}"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn mean_vector(zeta0: &Option<Vec<f64>>, p: usize) -> Result<DVector<f64>> {
    match zeta0 {
        None => Ok(DVector::zeros(p + 2)),
        Some(v) if v.len() == p + 2 => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(AllocError::DimensionMismatch(format!(
            "zeta0 has length {} but p + 2 = {}",
            v.len(),
            p + 2
        ))),
    }
}

impl PriorSpec {
    pub fn flat() -> Self {
        PriorSpec::Flat {
            zeta0: None,
            a0: DEFAULT_A0,
            b0: DEFAULT_B0,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, PriorSpec::Flat { .. })
    }

    /// Builds the prior for `p` covariates.
    pub fn to_prior(&self, p: usize) -> Result<NigPrior> {
        if p == 0 {
            return Err(AllocError::DimensionMismatch("p must be >= 1".into()));
        }
        match self {
            PriorSpec::Flat { zeta0, a0, b0 } => {
                NigPrior::flat_with_mean(mean_vector(zeta0, p)?, *a0, *b0)
            }
            PriorSpec::Blocks {
                nu,
                rho,
                gamma,
                zeta0,
                a0,
                b0,
            } => {
                let nu = matrix_from_rows(nu, 2, 2, "nu")?;
                let rho = matrix_from_rows(rho, 2, p, "rho")?;
                let gamma = matrix_from_rows(gamma, p, p, "gamma")?;
                let mut v0 = DMatrix::zeros(p + 2, p + 2);
                v0.view_mut((0, 0), (2, 2)).copy_from(&nu);
                v0.view_mut((0, 2), (2, p)).copy_from(&rho);
                v0.view_mut((2, 0), (p, 2)).copy_from(&rho.transpose());
                v0.view_mut((2, 2), (p, p)).copy_from(&gamma);
                NigPrior::new(mean_vector(zeta0, p)?, v0, *a0, *b0)
            }
            PriorSpec::Covariance { v0, zeta0, a0, b0 } => {
                let v0 = matrix_from_rows(v0, p + 2, p + 2, "v0")?;
                NigPrior::new(mean_vector(zeta0, p)?, v0, *a0, *b0)
            }
            PriorSpec::Decomposition {
                h1,
                h2,
                b_rows,
                d,
                zeta0,
                a0,
                b0,
            } => {
                let decomp = PriorDecomposition::new(
                    *h1,
                    *h2,
                    matrix_from_rows(b_rows, 2, p, "b_rows")?,
                    matrix_from_rows(d, p, p, "d")?,
                )?;
                NigPrior::from_decomposition(&decomp, mean_vector(zeta0, p)?, *a0, *b0)
            }
        }
    }

    /// The decomposition given verbatim, when this spec is in that form.
    pub fn decomposition(&self, p: usize) -> Result<Option<PriorDecomposition>> {
        match self {
            PriorSpec::Decomposition { h1, h2, b_rows, d, .. } => Ok(Some(PriorDecomposition::new(
                *h1,
                *h2,
                matrix_from_rows(b_rows, 2, p, "b_rows")?,
                matrix_from_rows(d, p, p, "d")?,
            )?)),
            _ => Ok(None),
        }
    }

    /// Lossless spec for an existing prior.
    pub fn from_prior(prior: &NigPrior) -> Self {
        let zeta0 = Some(prior.zeta0().iter().copied().collect());
        match prior.covariance() {
            PriorCovariance::Flat => PriorSpec::Flat {
                zeta0,
                a0: prior.a0(),
                b0: prior.b0(),
            },
            PriorCovariance::Proper(v0) => PriorSpec::Covariance {
                v0: matrix_to_rows(v0),
                zeta0,
                a0: prior.a0(),
                b0: prior.b0(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_form() {
        let flat: PriorSpec = serde_json::from_str(r#"{"kind":"flat"}"#).unwrap();
        let prior = flat.to_prior(3).unwrap();
        assert!(prior.is_flat());
        assert_eq!(prior.expected_sigma2(), 1.0);

        let blocks: PriorSpec = serde_json::from_str(
            r#"{"kind":"blocks","nu":[[4,0],[0,9]],"rho":[[0],[0]],"gamma":[[1]],"a0":3,"b0":4}"#,
        )
        .unwrap();
        let prior = blocks.to_prior(1).unwrap();
        assert_eq!(prior.expected_sigma2(), 2.0);

        let decomp: PriorSpec = serde_json::from_str(
            r#"{"kind":"decomposition","h1":2,"h2":3,"b_rows":[[0.5],[-0.5]],"d":[[1]]}"#,
        )
        .unwrap();
        let d = decomp.decomposition(1).unwrap().unwrap();
        assert_eq!((d.h1, d.h2), (2.0, 3.0));
        assert!(decomp.to_prior(1).is_ok());
    }

    #[test]
    fn rejects_bad_shapes_and_fields() {
        let blocks: PriorSpec = serde_json::from_str(
            r#"{"kind":"blocks","nu":[[1,0],[0,1]],"rho":[[0,0]],"gamma":[[1]]}"#,
        )
        .unwrap();
        assert_eq!(blocks.to_prior(1).unwrap_err().code(), "DimensionMismatch");
        assert!(serde_json::from_str::<PriorSpec>(r#"{"kind":"flat","h1":1}"#).is_err());
        let low_a: PriorSpec = serde_json::from_str(r#"{"kind":"flat","a0":0.5}"#).unwrap();
        assert_eq!(low_a.to_prior(2).unwrap_err().code(), "InvalidPrior");
    }

    #[test]
    fn round_trips_through_from_prior() {
        let spec: PriorSpec = serde_json::from_str(
            r#"{"kind":"blocks","nu":[[2,0.1],[0.1,3]],"rho":[[0.2],[0.3]],"gamma":[[1.5]],"zeta0":[1,2,3]}"#,
        )
        .unwrap();
        let prior = spec.to_prior(1).unwrap();
        let again = PriorSpec::from_prior(&prior).to_prior(1).unwrap();
        assert_eq!(prior, again);
    }
}
