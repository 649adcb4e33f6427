//! Conjugate Normal-Inverse-Gamma linear model: prior, its block Cholesky
//! decomposition, covariates, allocations and the posterior update.
//!
//! Parameters are ordered `zeta = (gamma_0, gamma_1, beta)`: the control
//! intercept, the treatment intercept, then `p` covariate slopes. The design
//! row of unit `i` is `(1 - w_i, w_i, x_i)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AllocError, Result};
use crate::linalg::{self, max_abs, max_abs_diff, SpdFactor, PD_TOL};

/// Relative tolerance on `|V0 - V0'|`.
const SYMMETRY_TOL: f64 = 1e-9;
/// Off-diagonal of the prior Schur complement, relative to its largest entry.
const OFF_DIAG_TOL: f64 = 1e-9;
/// Reconstruction tolerance for `Q'Q = V0^-1`, relative to `1 + |V0^-1|_max`.
const RECON_TOL: f64 = 1e-8;

/// Prior covariance shape of `zeta`.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorCovariance {
    /// The flat conditional prior, `V0^-1 = 0` exactly.
    Flat,
    Proper(DMatrix<f64>),
}

/// Hyperparameters `(zeta0, V0, a0, b0)` of the conjugate prior.
#[derive(Clone, Debug, PartialEq)]
pub struct NigPrior {
    zeta0: DVector<f64>,
    covariance: PriorCovariance,
    a0: f64,
    b0: f64,
}

fn check_scale(a0: f64, b0: f64) -> Result<()> {
    if !(a0.is_finite() && a0 > 1.0) {
        return Err(AllocError::InvalidPrior(format!(
            "a0 must be finite and > 1 for a finite E[sigma^2]; got {a0}"
        )));
    }
    if !(b0.is_finite() && b0 > 0.0) {
        return Err(AllocError::InvalidPrior(format!(
            "b0 must be finite and > 0; got {b0}"
        )));
    }
    Ok(())
}

impl NigPrior {
    pub fn new(zeta0: DVector<f64>, v0: DMatrix<f64>, a0: f64, b0: f64) -> Result<Self> {
        check_scale(a0, b0)?;
        let k = zeta0.len();
        if k < 3 {
            return Err(AllocError::InvalidPrior(format!(
                "zeta0 must have length p + 2 with p >= 1; got {k}"
            )));
        }
        if v0.nrows() != k || v0.ncols() != k {
            return Err(AllocError::DimensionMismatch(format!(
                "V0 is {}x{} but zeta0 has length {k}",
                v0.nrows(),
                v0.ncols()
            )));
        }
        if zeta0.iter().chain(v0.iter()).any(|v| !v.is_finite()) {
            return Err(AllocError::InvalidPrior("non-finite entry in zeta0 or V0".into()));
        }
        if !linalg::is_symmetric(&v0, SYMMETRY_TOL * (1.0 + max_abs(&v0))) {
            return Err(AllocError::InvalidPrior("V0 is not symmetric".into()));
        }
        if SpdFactor::new(&v0).is_none() {
            return Err(AllocError::NotPositiveDefinite("V0".into()));
        }
        Ok(Self {
            zeta0,
            covariance: PriorCovariance::Proper(linalg::symmetrize(&v0)),
            a0,
            b0,
        })
    }

    /// Flat conditional prior over `p` covariates with a zero prior mean.
    pub fn flat(p: usize, a0: f64, b0: f64) -> Result<Self> {
        Self::flat_with_mean(DVector::zeros(p + 2), a0, b0)
    }

    pub fn flat_with_mean(zeta0: DVector<f64>, a0: f64, b0: f64) -> Result<Self> {
        check_scale(a0, b0)?;
        if zeta0.len() < 3 {
            return Err(AllocError::InvalidPrior(format!(
                "zeta0 must have length p + 2 with p >= 1; got {}",
                zeta0.len()
            )));
        }
        Ok(Self {
            zeta0,
            covariance: PriorCovariance::Flat,
            a0,
            b0,
        })
    }

    /// Prior whose precision is `Q'Q` for the given decomposition.
    pub fn from_decomposition(
        decomp: &PriorDecomposition,
        zeta0: DVector<f64>,
        a0: f64,
        b0: f64,
    ) -> Result<Self> {
        let v0 = linalg::invert_spd(&decomp.precision(), "Q'Q")?;
        Self::new(zeta0, v0, a0, b0)
    }

    /// Number of covariates `p`.
    pub fn p(&self) -> usize {
        self.zeta0.len() - 2
    }

    pub fn zeta0(&self) -> &DVector<f64> {
        &self.zeta0
    }

    pub fn covariance(&self) -> &PriorCovariance {
        &self.covariance
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.covariance, PriorCovariance::Flat)
    }

    /// `E[sigma^2] = b0 / (a0 - 1)`.
    pub fn expected_sigma2(&self) -> f64 {
        self.b0 / (self.a0 - 1.0)
    }

    /// `V0^-1`, the zero matrix for the flat prior.
    pub fn precision(&self) -> DMatrix<f64> {
        match &self.covariance {
            PriorCovariance::Flat => DMatrix::zeros(self.zeta0.len(), self.zeta0.len()),
            PriorCovariance::Proper(v0) => SpdFactor::new(v0)
                .expect("validated at construction")
                .inverse(),
        }
    }
}

/// Blocks of the upper Cholesky factor `Q = [[H, B], [0, D]]` of `V0^-1`
/// with diagonal `H = diag(h1, h2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDecomposition {
    pub h1: f64,
    pub h2: f64,
    /// `2 x p`, rows `b1` and `b2`.
    pub b_rows: DMatrix<f64>,
    /// `p x p` upper-triangular with positive diagonal.
    pub d: DMatrix<f64>,
}

impl PriorDecomposition {
    pub fn new(h1: f64, h2: f64, b_rows: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if !(h1.is_finite() && h1 > 0.0 && h2.is_finite() && h2 > 0.0) {
            return Err(AllocError::InvalidPrior(format!(
                "h1 and h2 must be positive; got {h1}, {h2}"
            )));
        }
        let p = d.nrows();
        if p == 0 || d.ncols() != p {
            return Err(AllocError::DimensionMismatch(format!(
                "D must be square p x p with p >= 1; got {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        if b_rows.nrows() != 2 || b_rows.ncols() != p {
            return Err(AllocError::DimensionMismatch(format!(
                "B must be 2 x {p}; got {}x{}",
                b_rows.nrows(),
                b_rows.ncols()
            )));
        }
        if b_rows.iter().chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(AllocError::InvalidPrior("non-finite entry in B or D".into()));
        }
        for i in 0..p {
            if d[(i, i)] <= 0.0 {
                return Err(AllocError::InvalidPrior(format!(
                    "D must have a positive diagonal; D[{i},{i}] = {}",
                    d[(i, i)]
                )));
            }
            for j in 0..i {
                if d[(i, j)] != 0.0 {
                    return Err(AllocError::InvalidPrior("D must be upper-triangular".into()));
                }
            }
        }
        Ok(Self { h1, h2, b_rows, d })
    }

    pub fn p(&self) -> usize {
        self.d.nrows()
    }

    pub fn b1(&self) -> DVector<f64> {
        self.b_rows.row(0).transpose()
    }

    pub fn b2(&self) -> DVector<f64> {
        self.b_rows.row(1).transpose()
    }

    /// The full `(p+2) x (p+2)` factor `Q`.
    pub fn q(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut q = DMatrix::zeros(p + 2, p + 2);
        q[(0, 0)] = self.h1;
        q[(1, 1)] = self.h2;
        q.view_mut((0, 2), (2, p)).copy_from(&self.b_rows);
        q.view_mut((2, 2), (p, p)).copy_from(&self.d);
        q
    }

    /// `Q'Q`, the prior precision `V0^-1`.
    pub fn precision(&self) -> DMatrix<f64> {
        let q = self.q();
        q.transpose() * q
    }
}

/// Block Cholesky decomposition of the prior precision.
///
/// With `V0 = [[nu, rho], [rho', gamma]]` this returns
/// `H = (nu - rho gamma^-1 rho')^(-1/2)`, `B = -H rho gamma^-1` and
/// `D = chol(gamma^-1)`; `H` exists as a diagonal matrix only when the Schur
/// complement is diagonal.
pub fn decompose_prior(prior: &NigPrior) -> Result<PriorDecomposition> {
    let v0 = match prior.covariance() {
        PriorCovariance::Flat => {
            return Err(AllocError::InvalidPrior(
                "the flat prior has no Cholesky decomposition".into(),
            ))
        }
        PriorCovariance::Proper(v0) => v0,
    };
    let p = prior.p();
    let nu = v0.view((0, 0), (2, 2)).into_owned();
    let rho = v0.view((0, 2), (2, p)).into_owned();
    let gamma = v0.view((2, 2), (p, p)).into_owned();

    let gamma_inv = SpdFactor::new(&gamma)
        .ok_or_else(|| AllocError::NotPositiveDefinite("gamma block of V0".into()))?
        .inverse();
    let rho_gi = &rho * &gamma_inv;
    let schur = linalg::symmetrize(&(&nu - &rho_gi * rho.transpose()));
    let tolerance = OFF_DIAG_TOL * max_abs(&schur);
    let off_diagonal = schur[(0, 1)].abs();
    if off_diagonal > tolerance {
        return Err(AllocError::SchurNotDiagonal {
            off_diagonal,
            tolerance,
        });
    }
    let (s11, s22) = (schur[(0, 0)], schur[(1, 1)]);
    if !(s11 > PD_TOL && s22 > PD_TOL) {
        return Err(AllocError::NotPositiveDefinite(format!(
            "Schur complement diagonal ({s11:e}, {s22:e})"
        )));
    }
    let (h1, h2) = (s11.powf(-0.5), s22.powf(-0.5));
    let h = DMatrix::from_diagonal(&DVector::from_vec(vec![h1, h2]));
    let b_rows = -(h * rho_gi);
    let d = SpdFactor::new(&gamma_inv)
        .ok_or_else(|| AllocError::NotPositiveDefinite("gamma^-1".into()))?
        .lower()
        .transpose();

    let decomp = PriorDecomposition { h1, h2, b_rows, d };
    let v0_inv = prior.precision();
    let err = max_abs_diff(&decomp.precision(), &v0_inv);
    let recon_tol = RECON_TOL * (1.0 + max_abs(&v0_inv));
    if err > recon_tol {
        return Err(AllocError::NotPositiveDefinite(format!(
            "Q'Q reconstructs V0^-1 only to {err:e} (tolerance {recon_tol:e})"
        )));
    }
    Ok(decomp)
}

/// `n x p` covariate matrix with cached column means, Gram and scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix {
    x: DMatrix<f64>,
    means: DVector<f64>,
    gram: DMatrix<f64>,
    scatter: DMatrix<f64>,
}

impl CovariateMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(AllocError::DimensionMismatch(
                "covariate matrix needs at least one column".into(),
            ));
        }
        if let Some((idx, v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (idx % x.nrows(), idx / x.nrows());
            return Err(AllocError::InvalidInput(format!(
                "covariate ({row}, {col}) is not finite: {v}"
            )));
        }
        let n = x.nrows();
        let gram = x.transpose() * &x;
        let means = if n == 0 {
            DVector::zeros(x.ncols())
        } else {
            x.row_sum().transpose() / n as f64
        };
        let scatter = linalg::symmetrize(&(&gram - (&means * means.transpose()) * n as f64));
        Ok(Self {
            x,
            means,
            gram,
            scatter,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(AllocError::DimensionMismatch(format!(
                "row {bad} has {} values, expected {p}",
                rows[bad].len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), p, &flat))
    }

    pub fn empty(p: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(0, p))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.x
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Column means `xbar`.
    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    /// Column sums `1'X`.
    pub fn sums(&self) -> DVector<f64> {
        self.x.row_sum().transpose()
    }

    /// Uncentered Gram matrix `X'X`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Scatter matrix `S(X) = X'X - n xbar' xbar`.
    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self::new(self.x.select_rows(idx)).expect("rows of a valid matrix")
    }

    /// Rows of `self` followed by the rows of `other`.
    pub fn stack(&self, other: &Self) -> Result<Self> {
        if self.p() != other.p() {
            return Err(AllocError::DimensionMismatch(format!(
                "cannot stack p = {} onto p = {}",
                other.p(),
                self.p()
            )));
        }
        let mut x = DMatrix::zeros(self.n() + other.n(), self.p());
        x.view_mut((0, 0), (self.n(), self.p())).copy_from(&self.x);
        x.view_mut((self.n(), 0), (other.n(), self.p()))
            .copy_from(&other.x);
        Self::new(x)
    }

    /// `X + 1 c'` for a constant row shift `c`.
    pub fn translate(&self, shift: &DVector<f64>) -> Self {
        let mut x = self.x.clone();
        for mut row in x.row_iter_mut() {
            row += shift.transpose();
        }
        Self::new(x).expect("shifted matrix stays finite")
    }
}

/// Treatment indicator vector: `w[i] = 1` puts unit `i` in the treatment arm.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Allocation {
    w: Vec<u8>,
}

impl TryFrom<Vec<u8>> for Allocation {
    type Error = AllocError;

    fn try_from(w: Vec<u8>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<Allocation> for Vec<u8> {
    fn from(a: Allocation) -> Self {
        a.w
    }
}

impl Allocation {
    pub fn new(w: Vec<u8>) -> Result<Self> {
        if let Some(i) = w.iter().position(|&v| v > 1) {
            return Err(AllocError::InvalidInput(format!(
                "allocation entry {i} is {}, expected 0 or 1",
                w[i]
            )));
        }
        Ok(Self { w })
    }

    pub fn from_bools(w: &[bool]) -> Self {
        Self {
            w: w.iter().map(|&t| u8::from(t)).collect(),
        }
    }

    /// Bit `i` of `mask` is `w[i]`.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        debug_assert!(n <= 64);
        Self {
            w: (0..n).map(|i| ((mask >> i) & 1) as u8).collect(),
        }
    }

    pub fn all_control(n: usize) -> Self {
        Self { w: vec![0; n] }
    }

    pub fn all_treatment(n: usize) -> Self {
        Self { w: vec![1; n] }
    }

    /// Parses `"0,1,1,0"`.
    pub fn parse(s: &str) -> Result<Self> {
        let w = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(AllocError::InvalidInput(format!(
                    "allocation entry {other:?} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.w
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.w[i] == 1
    }

    pub fn n_t(&self) -> usize {
        self.w.iter().map(|&v| v as usize).sum()
    }

    pub fn n_c(&self) -> usize {
        self.w.len() - self.n_t()
    }

    /// The label-swapped allocation `1 - w`.
    pub fn complement(&self) -> Self {
        Self {
            w: self.w.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut w = self.w.clone();
        w.extend_from_slice(&other.w);
        Self { w }
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.w.len()).filter(|&i| self.w[i] == 0).collect()
    }

    pub fn treatment_indices(&self) -> Vec<usize> {
        (0..self.w.len()).filter(|&i| self.w[i] == 1).collect()
    }
}

impl fmt::Display for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.w.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_alloc(x: &CovariateMatrix, alloc: &Allocation) -> Result<()> {
    if alloc.len() != x.n() {
        return Err(AllocError::DimensionMismatch(format!(
            "allocation has length {} but X has {} rows",
            alloc.len(),
            x.n()
        )));
    }
    Ok(())
}

/// Design matrix `Z = (1 - w, w, X)`.
pub fn build_design(x: &CovariateMatrix, alloc: &Allocation) -> Result<DMatrix<f64>> {
    check_alloc(x, alloc)?;
    let (n, p) = (x.n(), x.p());
    let mut z = DMatrix::zeros(n, p + 2);
    for i in 0..n {
        let t = f64::from(alloc.as_slice()[i]);
        z[(i, 0)] = 1.0 - t;
        z[(i, 1)] = t;
    }
    z.view_mut((0, 2), (n, p)).copy_from(x.matrix());
    Ok(z)
}

/// Posterior hyperparameters `(zeta1, V1, a1, b1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub zeta1: DVector<f64>,
    pub v1: DMatrix<f64>,
    /// `V1^-1 = V0^-1 + Z'Z`.
    pub precision: DMatrix<f64>,
    pub a1: f64,
    pub b1: f64,
}

impl Posterior {
    pub fn expected_sigma2(&self) -> f64 {
        self.b1 / (self.a1 - 1.0)
    }

    /// The posterior used as the prior of the next batch.
    pub fn as_prior(&self) -> Result<NigPrior> {
        NigPrior::new(self.zeta1.clone(), self.v1.clone(), self.a1, self.b1)
    }
}

/// Conjugate update of the prior on outcomes `y` observed under `alloc`.
pub fn posterior_update(
    prior: &NigPrior,
    x: &CovariateMatrix,
    alloc: &Allocation,
    y: &DVector<f64>,
) -> Result<Posterior> {
    if x.p() != prior.p() {
        return Err(AllocError::DimensionMismatch(format!(
            "prior has p = {} but X has p = {}",
            prior.p(),
            x.p()
        )));
    }
    let z = build_design(x, alloc)?;
    if y.len() != x.n() {
        return Err(AllocError::LengthMismatch {
            expected: x.n(),
            actual: y.len(),
        });
    }
    let p0 = prior.precision();
    let p1 = linalg::symmetrize(&(&p0 + z.transpose() * &z));
    let factor = SpdFactor::new(&p1).ok_or_else(|| {
        AllocError::SingularSystem("V0^-1 + Z'Z is not positive definite".into())
    })?;
    let zeta0 = prior.zeta0();
    let rhs = &p0 * zeta0 + z.transpose() * y;
    let zeta1 = factor.solve(&rhs);
    let quad = zeta0.dot(&(&p0 * zeta0)) + y.dot(y) - zeta1.dot(&(&p1 * &zeta1));
    let b1 = prior.b0() + 0.5 * quad.max(0.0);
    Ok(Posterior {
        zeta1,
        v1: factor.inverse(),
        precision: p1,
        a1: prior.a0() + x.n() as f64 / 2.0,
        b1,
    })
}

/// Inverse-gamma scale update `(a, b)` from design `z` and outcomes `y`.
///
/// Unlike [`posterior_update`] this also covers a flat prior with a
/// rank-deficient design: `b` then grows by half the residual sum of squares
/// of the minimum-norm least-squares fit, the `V0^-1 -> 0` limit.
pub fn update_scale(prior: &NigPrior, z: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    if z.nrows() != y.len() {
        return Err(AllocError::LengthMismatch {
            expected: z.nrows(),
            actual: y.len(),
        });
    }
    let a = prior.a0() + y.len() as f64 / 2.0;
    if y.is_empty() {
        return Ok((prior.a0(), prior.b0()));
    }
    let p0 = prior.precision();
    let p1 = linalg::symmetrize(&(&p0 + z.transpose() * z));
    let zeta0 = prior.zeta0();
    if let Some(factor) = SpdFactor::new(&p1) {
        let zeta1 = factor.solve(&(&p0 * zeta0 + z.transpose() * y));
        let quad = zeta0.dot(&(&p0 * zeta0)) + y.dot(y) - zeta1.dot(&(&p1 * &zeta1));
        return Ok((a, prior.b0() + 0.5 * quad.max(0.0)));
    }
    if !prior.is_flat() {
        return Err(AllocError::SingularSystem(
            "V0^-1 + Z'Z is not positive definite".into(),
        ));
    }
    let svd = z.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    let fit = svd
        .solve(y, eps)
        .map_err(|e| AllocError::SingularSystem(e.to_string()))?;
    let resid = y - z * fit;
    Ok((a, prior.b0() + 0.5 * resid.dot(&resid)))
}
