//! Bayes decision risk of an allocation.
//!
//! The risk of `w` is `A V1 A' E[sigma^2]` with contrast `A = (-1, 1, 0, ..., 0)`.
//! Writing the prior precision as pseudo-observations (arm sizes `h1^2`,
//! `h2^2`, pseudo-covariate totals `h1 b1`, `h2 b2`, regularizer
//! `B'B + D'D`), the risk reduces to
//!
//! ```text
//! risk = k^2 / (k - u' Phi^-1 u) * E[sigma^2],   k = s / (s_C s_T)
//! u    = gbar_T - gbar_C
//! Phi  = X'X + B'B + D'D - s gbar gbar'
//! ```
//!
//! `Phi` does not depend on the allocation, so [`RiskEvaluator`] factorizes
//! it once per sample and every allocation costs one mean update and one
//! triangular solve. The same evaluator covers sequential batches: units
//! allocated earlier enter through [`ArmTotals`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AllocError, Result};
use crate::linalg::{near_integer, SpdFactor};
use crate::model::{decompose_prior, Allocation, CovariateMatrix, NigPrior, PriorDecomposition};

/// Relative slack below which the risk denominator counts as non-positive.
const DENOMINATOR_TOL: f64 = 1e-12;
const INTEGER_TOL: f64 = 1e-9;

/// Per-allocation risk and the terms it is assembled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    /// Expected posterior variance of the treatment effect.
    pub risk: f64,
    /// `s / (s_C s_T)`.
    pub size_term: f64,
    /// `(gbar_T - gbar_C) Phi^-1 (gbar_T - gbar_C)'`.
    pub imbalance_quad: f64,
    /// Effective control size `n_C + h1^2`.
    pub s_c: f64,
    /// Effective treatment size `n_T + h2^2`.
    pub s_t: f64,
    /// Mahalanobis distance between arm covariate means, flat prior only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mahalanobis: Option<f64>,
    pub e_sigma2: f64,
}

impl RiskBreakdown {
    fn assemble(
        size_term: f64,
        imbalance_quad: f64,
        s_c: f64,
        s_t: f64,
        e_sigma2: f64,
        flat: bool,
    ) -> Result<Self> {
        let denominator = size_term - imbalance_quad;
        if !(denominator > DENOMINATOR_TOL * size_term) {
            return Err(if flat {
                AllocError::DegenerateDesign { denominator }
            } else {
                AllocError::NonPositiveDenominator { denominator }
            });
        }
        let mahalanobis = flat.then(|| {
            // M = n (n_C/n)(n_T/n) d Cov^-1 d' = (n - 1) q / k
            let n = s_c + s_t;
            (n - 1.0) * imbalance_quad / size_term
        });
        Ok(Self {
            risk: size_term * size_term / denominator * e_sigma2,
            size_term,
            imbalance_quad,
            s_c,
            s_t,
            mahalanobis,
            e_sigma2,
        })
    }
}

/// The prior precision written as pseudo-observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPrior {
    pub h1_sq: f64,
    pub h2_sq: f64,
    /// `h1 b1'`, the control pseudo-sample covariate total.
    pub control_total: DVector<f64>,
    /// `h2 b2'`.
    pub treatment_total: DVector<f64>,
    /// `B'B + D'D`.
    pub regularizer: DMatrix<f64>,
    flat: bool,
}

impl PseudoPrior {
    pub fn flat(p: usize) -> Self {
        Self {
            h1_sq: 0.0,
            h2_sq: 0.0,
            control_total: DVector::zeros(p),
            treatment_total: DVector::zeros(p),
            regularizer: DMatrix::zeros(p, p),
            flat: true,
        }
    }

    pub fn from_decomposition(d: &PriorDecomposition) -> Self {
        Self {
            h1_sq: d.h1 * d.h1,
            h2_sq: d.h2 * d.h2,
            control_total: d.b1() * d.h1,
            treatment_total: d.b2() * d.h2,
            regularizer: d.b_rows.transpose() * &d.b_rows + d.d.transpose() * &d.d,
            flat: false,
        }
    }

    pub fn from_prior(prior: &NigPrior) -> Result<Self> {
        if prior.is_flat() {
            Ok(Self::flat(prior.p()))
        } else {
            Ok(Self::from_decomposition(&decompose_prior(prior)?))
        }
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn p(&self) -> usize {
        self.control_total.len()
    }
}

/// Sufficient statistics of units already allocated: arm counts, arm
/// covariate totals and the covariate Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmTotals {
    pub n_c: usize,
    pub n_t: usize,
    pub sum_c: DVector<f64>,
    pub sum_t: DVector<f64>,
    pub gram: DMatrix<f64>,
}

impl ArmTotals {
    pub fn empty(p: usize) -> Self {
        Self {
            n_c: 0,
            n_t: 0,
            sum_c: DVector::zeros(p),
            sum_t: DVector::zeros(p),
            gram: DMatrix::zeros(p, p),
        }
    }

    pub fn from_design(x: &CovariateMatrix, alloc: &Allocation) -> Result<Self> {
        let mut t = Self::empty(x.p());
        t.add(x, alloc)?;
        Ok(t)
    }

    pub fn p(&self) -> usize {
        self.sum_c.len()
    }

    pub fn n(&self) -> usize {
        self.n_c + self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    /// Folds a batch and its allocation into the totals.
    pub fn add(&mut self, x: &CovariateMatrix, alloc: &Allocation) -> Result<()> {
        if x.p() != self.p() {
            return Err(AllocError::DimensionMismatch(format!(
                "batch has p = {} but the design has p = {}",
                x.p(),
                self.p()
            )));
        }
        if alloc.len() != x.n() {
            return Err(AllocError::DimensionMismatch(format!(
                "allocation has length {} but the batch has {} rows",
                alloc.len(),
                x.n()
            )));
        }
        for i in 0..x.n() {
            let row = x.row(i);
            if alloc.is_treated(i) {
                self.sum_t += &row;
                self.n_t += 1;
            } else {
                self.sum_c += &row;
                self.n_c += 1;
            }
        }
        self.gram += x.gram();
        Ok(())
    }
}

impl ArmTotals {
    /// `Z'Z` of the accumulated design, columns ordered `(control, treatment, X)`.
    pub fn design_gram(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut m = DMatrix::zeros(p + 2, p + 2);
        m[(0, 0)] = self.n_c as f64;
        m[(1, 1)] = self.n_t as f64;
        for j in 0..p {
            m[(0, j + 2)] = self.sum_c[j];
            m[(j + 2, 0)] = self.sum_c[j];
            m[(1, j + 2)] = self.sum_t[j];
            m[(j + 2, 1)] = self.sum_t[j];
        }
        m.view_mut((2, 2), (p, p)).copy_from(&self.gram);
        m
    }
}

/// Eigenvalues below this fraction of the largest count as zero.
const NULL_EIGEN_TOL: f64 = 1e-10;

/// Leading behaviour of the risk under the ridge precision `eps I` as
/// `eps -> 0`: `risk(eps) ~ divergence / eps + finite_part`.
///
/// The flat-prior risk is this limit. When the accumulated design does not
/// identify the treatment contrast the limit is infinite, and `divergence`
/// (the contrast's squared projection onto the null space of `Z'Z`, times
/// `E[sigma^2]`) measures how far it is from identified.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatLimit {
    pub divergence: f64,
    pub finite_part: f64,
}

impl FlatLimit {
    pub fn identified(&self) -> bool {
        self.divergence == 0.0
    }
}

pub fn flat_limit(totals: &ArmTotals, e_sigma2: f64) -> FlatLimit {
    let eig = totals.design_gram().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut divergence = 0.0;
    let mut finite_part = 0.0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let proj = v[1] - v[0];
        if lambda <= NULL_EIGEN_TOL * top {
            divergence += proj * proj;
        } else {
            finite_part += proj * proj / lambda;
        }
    }
    FlatLimit {
        divergence: divergence * e_sigma2,
        finite_part: finite_part * e_sigma2,
    }
}

/// Evaluates the risk of allocations of one batch of units, conditional on
/// the prior and on previously allocated units.
#[derive(Clone, Debug)]
pub struct RiskEvaluator {
    flat: bool,
    batch: CovariateMatrix,
    batch_sums: DVector<f64>,
    base_s_c: f64,
    base_s_t: f64,
    base_total_c: DVector<f64>,
    base_total_t: DVector<f64>,
    history_n_c: usize,
    history_n_t: usize,
    phi: Option<SpdFactor>,
    e_sigma2: f64,
}

impl RiskEvaluator {
    pub fn new(
        pseudo: &PseudoPrior,
        history: &ArmTotals,
        batch: &CovariateMatrix,
        e_sigma2: f64,
    ) -> Result<Self> {
        let p = pseudo.p();
        if history.p() != p || batch.p() != p {
            return Err(AllocError::DimensionMismatch(format!(
                "prior has p = {p}, history p = {}, batch p = {}",
                history.p(),
                batch.p()
            )));
        }
        if !(e_sigma2.is_finite() && e_sigma2 > 0.0) {
            return Err(AllocError::InvalidInput(format!(
                "E[sigma^2] must be positive; got {e_sigma2}"
            )));
        }
        let batch_sums = batch.sums();
        let base_total_c = &pseudo.control_total + &history.sum_c;
        let base_total_t = &pseudo.treatment_total + &history.sum_t;
        let s = pseudo.h1_sq + pseudo.h2_sq + (history.n() + batch.n()) as f64;
        let phi = if s > 0.0 {
            let total = &base_total_c + &base_total_t + &batch_sums;
            let phi = &pseudo.regularizer + &history.gram + batch.gram()
                - (&total * total.transpose()) / s;
            SpdFactor::new(&phi)
        } else {
            None
        };
        Ok(Self {
            flat: pseudo.is_flat(),
            batch: batch.clone(),
            batch_sums,
            base_s_c: pseudo.h1_sq + history.n_c as f64,
            base_s_t: pseudo.h2_sq + history.n_t as f64,
            base_total_c,
            base_total_t,
            history_n_c: history.n_c,
            history_n_t: history.n_t,
            phi,
            e_sigma2,
        })
    }

    /// Evaluator for a single-shot allocation of `x` under `prior`.
    pub fn for_prior(prior: &NigPrior, x: &CovariateMatrix, e_sigma2: f64) -> Result<Self> {
        if prior.p() != x.p() {
            return Err(AllocError::DimensionMismatch(format!(
                "prior has p = {} but X has p = {}",
                prior.p(),
                x.p()
            )));
        }
        let pseudo = PseudoPrior::from_prior(prior)?;
        Self::new(&pseudo, &ArmTotals::empty(x.p()), x, e_sigma2)
    }

    pub fn batch(&self) -> &CovariateMatrix {
        &self.batch
    }

    pub fn n(&self) -> usize {
        self.batch.n()
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn e_sigma2(&self) -> f64 {
        self.e_sigma2
    }

    /// Same evaluator with risks scaled by a different `E[sigma^2]`.
    pub fn with_e_sigma2(&self, e_sigma2: f64) -> Self {
        Self {
            e_sigma2,
            ..self.clone()
        }
    }

    /// Whether `w` and `1 - w` always have equal risk: a flat prior and no
    /// previously allocated units.
    pub fn label_symmetric(&self) -> bool {
        self.flat && self.history_n_c == 0 && self.history_n_t == 0
    }

    pub fn evaluate(&self, alloc: &Allocation) -> Result<RiskBreakdown> {
        if alloc.len() != self.batch.n() {
            return Err(AllocError::DimensionMismatch(format!(
                "allocation has length {} but the batch has {} rows",
                alloc.len(),
                self.batch.n()
            )));
        }
        self.evaluate_slice(alloc.as_slice())
    }

    /// `w` must have one 0/1 entry per batch row.
    pub fn evaluate_slice(&self, w: &[u8]) -> Result<RiskBreakdown> {
        debug_assert_eq!(w.len(), self.batch.n());
        let x = self.batch.matrix();
        let p = x.ncols();
        let mut sum_t = DVector::zeros(p);
        let mut m_t = 0usize;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 1 {
                m_t += 1;
                for j in 0..p {
                    sum_t[j] += x[(i, j)];
                }
            }
        }
        let m_c = w.len() - m_t;
        if self.flat && (self.history_n_c + m_c == 0 || self.history_n_t + m_t == 0) {
            return Err(AllocError::EmptyArm {
                n_c: self.history_n_c + m_c,
                n_t: self.history_n_t + m_t,
            });
        }
        let Some(phi) = &self.phi else {
            return Err(if self.flat {
                AllocError::SingularScatter
            } else {
                AllocError::SingularPhi
            });
        };
        let s_c = self.base_s_c + m_c as f64;
        let s_t = self.base_s_t + m_t as f64;
        let sum_c = &self.batch_sums - &sum_t;
        let g_c = (&self.base_total_c + sum_c) / s_c;
        let g_t = (&self.base_total_t + sum_t) / s_t;
        let u = g_t - g_c;
        let size_term = (s_c + s_t) / (s_c * s_t);
        let quad = phi.inv_quadratic(&u);
        RiskBreakdown::assemble(size_term, quad, s_c, s_t, self.e_sigma2, self.flat)
    }
}

/// Risk under a proper prior given by its decomposition.
pub fn risk_general(
    decomp: &PriorDecomposition,
    x: &CovariateMatrix,
    alloc: &Allocation,
    e_sigma2: f64,
) -> Result<RiskBreakdown> {
    let pseudo = PseudoPrior::from_decomposition(decomp);
    RiskEvaluator::new(&pseudo, &ArmTotals::empty(x.p()), x, e_sigma2)?.evaluate(alloc)
}

/// Risk under the flat conditional prior.
pub fn risk_flat(x: &CovariateMatrix, alloc: &Allocation, e_sigma2: f64) -> Result<RiskBreakdown> {
    RiskEvaluator::new(&PseudoPrior::flat(x.p()), &ArmTotals::empty(x.p()), x, e_sigma2)?
        .evaluate(alloc)
}

/// Risk under any prior, flat or proper.
pub fn risk_for_prior(
    prior: &NigPrior,
    x: &CovariateMatrix,
    alloc: &Allocation,
    e_sigma2: f64,
) -> Result<RiskBreakdown> {
    RiskEvaluator::for_prior(prior, x, e_sigma2)?.evaluate(alloc)
}

/// Risk through the pseudo-sample matrix `G`: `X` extended with `h1^2`
/// copies of `b1/h1` (control) and `h2^2` copies of `b2/h2` (treatment),
/// with `Phi = S(G) + D'D`. Requires integer `h1^2` and `h2^2`.
pub fn risk_pseudo_sample(
    decomp: &PriorDecomposition,
    x: &CovariateMatrix,
    alloc: &Allocation,
    e_sigma2: f64,
) -> Result<RiskBreakdown> {
    let (h1_sq, h2_sq) = (decomp.h1 * decomp.h1, decomp.h2 * decomp.h2);
    if !(near_integer(h1_sq, INTEGER_TOL) && near_integer(h2_sq, INTEGER_TOL)) {
        return Err(AllocError::NonIntegerH2 { h1_sq, h2_sq });
    }
    if alloc.len() != x.n() {
        return Err(AllocError::DimensionMismatch(format!(
            "allocation has length {} but X has {} rows",
            alloc.len(),
            x.n()
        )));
    }
    if decomp.p() != x.p() {
        return Err(AllocError::DimensionMismatch(format!(
            "prior has p = {} but X has p = {}",
            decomp.p(),
            x.p()
        )));
    }
    let (k1, k2) = (h1_sq.round() as usize, h2_sq.round() as usize);
    let (n, p) = (x.n(), x.p());
    let pseudo_c = decomp.b1() / decomp.h1;
    let pseudo_t = decomp.b2() / decomp.h2;

    let mut g = DMatrix::zeros(n + k1 + k2, p);
    g.view_mut((0, 0), (n, p)).copy_from(x.matrix());
    for r in 0..k1 {
        g.row_mut(n + r).copy_from(&pseudo_c.transpose());
    }
    for r in 0..k2 {
        g.row_mut(n + k1 + r).copy_from(&pseudo_t.transpose());
    }
    let g = CovariateMatrix::new(g)?;

    // arm membership of every row of G
    let mut control_rows = alloc.control_indices();
    control_rows.extend(n..n + k1);
    let mut treatment_rows = alloc.treatment_indices();
    treatment_rows.extend(n + k1..n + k1 + k2);
    let (s_c, s_t) = (control_rows.len() as f64, treatment_rows.len() as f64);
    if control_rows.is_empty() || treatment_rows.is_empty() {
        return Err(AllocError::EmptyArm {
            n_c: alloc.n_c(),
            n_t: alloc.n_t(),
        });
    }
    let g_c = g.select(&control_rows).means().clone();
    let g_t = g.select(&treatment_rows).means().clone();
    let u = g_t - g_c;

    let phi = g.scatter() + decomp.d.transpose() * &decomp.d;
    let factor = SpdFactor::new(&phi).ok_or(AllocError::SingularPhi)?;
    let size_term = (s_c + s_t) / (s_c * s_t);
    RiskBreakdown::assemble(
        size_term,
        factor.inv_quadratic(&u),
        s_c,
        s_t,
        e_sigma2,
        false,
    )
}

/// Mahalanobis distance between arm covariate means,
/// `M = n (n_C/n)(n_T/n) (xbar_T - xbar_C) Cov(X)^-1 (xbar_T - xbar_C)'`
/// with the `n - 1` sample covariance.
pub fn mahalanobis(x: &CovariateMatrix, alloc: &Allocation) -> Result<f64> {
    if alloc.len() != x.n() {
        return Err(AllocError::DimensionMismatch(format!(
            "allocation has length {} but X has {} rows",
            alloc.len(),
            x.n()
        )));
    }
    let (n_c, n_t) = (alloc.n_c(), alloc.n_t());
    if n_c == 0 || n_t == 0 {
        return Err(AllocError::EmptyArm { n_c, n_t });
    }
    let n = x.n();
    if n < 2 {
        return Err(AllocError::SingularScatter);
    }
    let cov = x.scatter() / (n as f64 - 1.0);
    let factor = SpdFactor::new(&cov).ok_or(AllocError::SingularScatter)?;
    let diff = x.select(&alloc.treatment_indices()).means() - x.select(&alloc.control_indices()).means();
    let nf = n as f64;
    Ok(nf * (n_c as f64 / nf) * (n_t as f64 / nf) * factor.inv_quadratic(&diff))
}
