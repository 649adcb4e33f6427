//! Greedy batch-wise allocation of arriving units.
//!
//! Each batch is allocated to minimize its risk conditional on every
//! earlier allocation. Because the posterior of one batch is the prior of
//! the next, the session only has to carry the accumulated design
//! ([`ArmTotals`]) plus the inverse-gamma scale learned from recorded
//! outcomes. The raw history is kept for audit and replay.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::allocator::{enumerate_allocations, search, GroupSizeConstraint, OptimizerConfig, SearchMode};
use crate::config::{matrix_from_rows, matrix_to_rows, PriorSpec};
use crate::error::{AllocError, Result};
use crate::linalg::max_abs_diff;
use crate::model::{build_design, update_scale, Allocation, CovariateMatrix, NigPrior};
use crate::risk::{flat_limit, ArmTotals, FlatLimit, PseudoPrior, RiskBreakdown, RiskEvaluator};

pub const SNAPSHOT_VERSION: u32 = 1;
/// Agreement required between stored and replayed accumulated state.
pub const REPLAY_TOL: f64 = 1e-9;
/// Divergences closer than this (relative to `E[sigma^2]`) count as equal.
const DIVERGENCE_TOL: f64 = 1e-9;

/// One allocated batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub covariates: CovariateMatrix,
    pub allocation: Allocation,
    pub outcomes: Option<DVector<f64>>,
    /// Conditional risk reported when the batch was allocated. `None` when
    /// a flat prior leaves the treatment contrast unidentified.
    pub risk: Option<RiskBreakdown>,
    /// Ridge-limit summary, set only when `risk` is `None`.
    pub flat_limit: Option<FlatLimit>,
}

/// Allocation chosen for a batch together with how it was scored.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDecision {
    pub allocation: Allocation,
    pub risk: Option<RiskBreakdown>,
    pub flat_limit: Option<FlatLimit>,
}

/// A batch of arriving units to allocate.
#[derive(Clone, Debug)]
pub struct BatchRequest {
    pub u: CovariateMatrix,
    /// Per-batch arm quota `(m_C, m_T)`.
    pub quota: Option<(usize, usize)>,
    /// `None` picks exhaustive search when the batch fits under the
    /// exhaustive limit and local search otherwise.
    pub mode: Option<SearchMode>,
    pub optimizer: OptimizerConfig,
}

impl BatchRequest {
    pub fn new(u: CovariateMatrix) -> Self {
        Self {
            u,
            quota: None,
            mode: None,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn with_quota(mut self, m_c: usize, m_t: usize) -> Self {
        self.quota = Some((m_c, m_t));
        self
    }

    fn config(&self) -> Result<OptimizerConfig> {
        let m = self.u.n();
        let constraint = match self.quota {
            None => GroupSizeConstraint::Free,
            Some((m_c, m_t)) if m_c + m_t == m => GroupSizeConstraint::Fixed { n_c: m_c, n_t: m_t },
            Some((m_c, m_t)) => {
                return Err(AllocError::InfeasibleConstraint(format!(
                    "quota ({m_c}, {m_t}) does not sum to the batch size {m}"
                )))
            }
        };
        let mode = self.mode.unwrap_or(if m <= self.optimizer.exhaustive_limit {
            SearchMode::Exhaustive
        } else {
            SearchMode::LocalSearch
        });
        Ok(OptimizerConfig {
            mode,
            constraint,
            ..self.optimizer.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequentialSession {
    prior: NigPrior,
    pseudo: PseudoPrior,
    totals: ArmTotals,
    history: Vec<BatchRecord>,
    /// Inverse-gamma `(a, b)` after the scored batches.
    scale: (f64, f64),
}

/// Starts a session with no allocated units.
pub fn open_session(prior: &NigPrior, p: usize) -> Result<SequentialSession> {
    if p == 0 || prior.p() != p {
        return Err(AllocError::DimensionMismatch(format!(
            "session p = {p} but the prior has p = {}",
            prior.p()
        )));
    }
    Ok(SequentialSession {
        pseudo: PseudoPrior::from_prior(prior)?,
        totals: ArmTotals::empty(p),
        history: Vec::new(),
        scale: (prior.a0(), prior.b0()),
        prior: prior.clone(),
    })
}

impl SequentialSession {
    pub fn prior(&self) -> &NigPrior {
        &self.prior
    }

    pub fn p(&self) -> usize {
        self.totals.p()
    }

    pub fn totals(&self) -> &ArmTotals {
        &self.totals
    }

    pub fn history(&self) -> &[BatchRecord] {
        &self.history
    }

    /// Current `(l_C, l_T)`.
    pub fn arm_counts(&self) -> (usize, usize) {
        (self.totals.n_c, self.totals.n_t)
    }

    pub fn posterior_scalars(&self) -> (f64, f64) {
        self.scale
    }

    /// `E[sigma^2 | history] = b / (a - 1)`; the prior mean until outcomes
    /// are recorded.
    pub fn expected_sigma2(&self) -> f64 {
        self.scale.1 / (self.scale.0 - 1.0)
    }

    /// Evaluator for allocations of `u` given everything allocated so far.
    pub fn evaluator(&self, u: &CovariateMatrix) -> Result<RiskEvaluator> {
        RiskEvaluator::new(&self.pseudo, &self.totals, u, self.expected_sigma2())
    }

    pub fn conditional_risk(&self, u: &CovariateMatrix, w2: &Allocation) -> Result<RiskBreakdown> {
        if u.p() != self.p() {
            return Err(AllocError::DimensionMismatch(format!(
                "batch has p = {} but the session has p = {}",
                u.p(),
                self.p()
            )));
        }
        self.evaluator(u)?.evaluate(w2)
    }

    /// Chooses the conditional-risk-minimizing allocation of the batch and
    /// returns it with the session that has the batch folded in.
    ///
    /// Under a flat prior the early batches may leave every allocation with
    /// an infinite risk. The batch is then allocated by the ridge limit: the
    /// smallest divergence first, then the smallest finite part, then the
    /// lexicographically smallest allocation.
    pub fn allocate_batch(&self, req: &BatchRequest) -> Result<(BatchDecision, SequentialSession)> {
        if req.u.p() != self.p() {
            return Err(AllocError::DimensionMismatch(format!(
                "batch has p = {} but the session has p = {}",
                req.u.p(),
                self.p()
            )));
        }
        let cfg = req.config()?;
        let eval = self.evaluator(&req.u)?;
        let decision = match search(&eval, &cfg) {
            Ok(result) => BatchDecision {
                allocation: result.best_alloc,
                risk: Some(result.best_risk),
                flat_limit: None,
            },
            Err(AllocError::InfeasibleConstraint(_)) if eval.is_flat() => self.ridge_limit_choice(&req.u, &cfg)?,
            Err(e) => return Err(e),
        };
        let next = self.with_batch(&req.u, &decision)?;
        Ok((decision, next))
    }

    fn ridge_limit_choice(&self, u: &CovariateMatrix, cfg: &OptimizerConfig) -> Result<BatchDecision> {
        let e = self.expected_sigma2();
        let tol = DIVERGENCE_TOL * e;
        let mut best: Option<(FlatLimit, Allocation)> = None;
        for w in enumerate_allocations(u.n(), &cfg.constraint, false, cfg.exhaustive_limit)? {
            let lim = self.limit_with(u, &w)?;
            let better = match &best {
                None => true,
                Some((b, bw)) => {
                    if lim.divergence < b.divergence - tol {
                        true
                    } else if lim.divergence > b.divergence + tol {
                        false
                    } else if lim.finite_part < b.finite_part * (1.0 - 1e-12) {
                        true
                    } else {
                        lim.finite_part <= b.finite_part * (1.0 + 1e-12) && w.as_slice() < bw.as_slice()
                    }
                }
            };
            if better {
                best = Some((lim, w));
            }
        }
        let (lim, w) = best.ok_or_else(|| AllocError::InfeasibleConstraint("no feasible allocation".into()))?;
        Ok(BatchDecision {
            allocation: w,
            risk: None,
            flat_limit: Some(lim),
        })
    }

    fn limit_with(&self, u: &CovariateMatrix, w2: &Allocation) -> Result<FlatLimit> {
        let mut totals = self.totals.clone();
        totals.add(u, w2)?;
        Ok(flat_limit(&totals, self.expected_sigma2()))
    }

    /// Folds a batch under a given allocation, reporting its conditional risk
    /// (or, under a flat prior without an identified contrast, its ridge limit).
    pub fn apply_allocation(&self, u: &CovariateMatrix, w2: &Allocation) -> Result<SequentialSession> {
        let decision = match self.conditional_risk(u, w2) {
            Ok(risk) => BatchDecision {
                allocation: w2.clone(),
                risk: Some(risk),
                flat_limit: None,
            },
            Err(AllocError::EmptyArm { .. } | AllocError::DegenerateDesign { .. } | AllocError::SingularScatter)
                if self.prior.is_flat() =>
            {
                BatchDecision {
                    allocation: w2.clone(),
                    risk: None,
                    flat_limit: Some(self.limit_with(u, w2)?),
                }
            }
            Err(e) => return Err(e),
        };
        self.with_batch(u, &decision)
    }

    fn with_batch(&self, u: &CovariateMatrix, decision: &BatchDecision) -> Result<SequentialSession> {
        let w2 = &decision.allocation;
        let mut next = self.clone();
        next.totals.add(u, w2)?;
        next.history.push(BatchRecord {
            covariates: u.clone(),
            allocation: w2.clone(),
            outcomes: None,
            risk: decision.risk.clone(),
            flat_limit: decision.flat_limit,
        });
        Ok(next)
    }

    /// Records observed outcomes of batch `batch` and updates `(a, b)`.
    pub fn record_outcomes(&self, batch: usize, y: &DVector<f64>) -> Result<SequentialSession> {
        let record = self.history.get(batch).ok_or(AllocError::UnknownBatch(batch))?;
        if record.outcomes.is_some() {
            return Err(AllocError::AlreadyScored(batch));
        }
        if y.len() != record.covariates.n() {
            return Err(AllocError::LengthMismatch {
                expected: record.covariates.n(),
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(AllocError::InvalidInput("outcomes must be finite".into()));
        }
        let mut next = self.clone();
        next.history[batch].outcomes = Some(y.clone());
        next.scale = next.scored_scale()?;
        Ok(next)
    }

    /// `(a, b)` from the conjugate update on all scored batches.
    fn scored_scale(&self) -> Result<(f64, f64)> {
        let scored: Vec<&BatchRecord> = self.history.iter().filter(|r| r.outcomes.is_some()).collect();
        let rows: usize = scored.iter().map(|r| r.covariates.n()).sum();
        let mut z = DMatrix::zeros(rows, self.p() + 2);
        let mut y = DVector::zeros(rows);
        let mut at = 0;
        for r in scored {
            let zb = build_design(&r.covariates, &r.allocation)?;
            z.view_mut((at, 0), (zb.nrows(), zb.ncols())).copy_from(&zb);
            y.rows_mut(at, zb.nrows())
                .copy_from(r.outcomes.as_ref().expect("filtered to scored"));
            at += zb.nrows();
        }
        update_scale(&self.prior, &z, &y)
    }

    /// Rebuilds a session from its prior and raw history.
    pub fn replay(prior: &NigPrior, history: &[BatchRecord]) -> Result<SequentialSession> {
        let mut session = open_session(prior, prior.p())?;
        for r in history {
            session.totals.add(&r.covariates, &r.allocation)?;
            session.history.push(r.clone());
        }
        session.scale = session.scored_scale()?;
        Ok(session)
    }

    /// Largest deviation between the accumulated state and a recomputation
    /// from the raw history.
    pub fn replay_deviation(&self) -> Result<f64> {
        let replayed = Self::replay(&self.prior, &self.history)?;
        let (a, b) = (&self.totals, &replayed.totals);
        if (a.n_c, a.n_t) != (b.n_c, b.n_t) {
            return Ok(f64::INFINITY);
        }
        let dev = max_abs_diff(&a.gram, &b.gram)
            .max((&a.sum_c - &b.sum_c).amax())
            .max((&a.sum_t - &b.sum_t).amax())
            .max((self.scale.0 - replayed.scale.0).abs())
            .max((self.scale.1 - replayed.scale.1).abs());
        Ok(dev)
    }

    /// Conditional risk of one more unit at the current covariate mean,
    /// placed in control and in treatment.
    pub fn what_if(&self) -> (Option<RiskBreakdown>, Option<RiskBreakdown>) {
        let n = self.totals.n();
        let mean = if n == 0 {
            DVector::zeros(self.p())
        } else {
            (&self.totals.sum_c + &self.totals.sum_t) / n as f64
        };
        let unit = CovariateMatrix::new(DMatrix::from_row_slice(1, self.p(), mean.as_slice()))
            .expect("finite mean");
        let Ok(eval) = self.evaluator(&unit) else {
            return (None, None);
        };
        (
            eval.evaluate(&Allocation::all_control(1)).ok(),
            eval.evaluate(&Allocation::all_treatment(1)).ok(),
        )
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            version: SNAPSHOT_VERSION,
            prior: PriorSpec::from_prior(&self.prior),
            p: self.p(),
            accumulated: AccumulatedSnapshot {
                l_c: self.totals.n_c,
                l_t: self.totals.n_t,
                sum_c: self.totals.sum_c.iter().copied().collect(),
                sum_t: self.totals.sum_t.iter().copied().collect(),
                gram: matrix_to_rows(&self.totals.gram),
            },
            history: self
                .history
                .iter()
                .map(|r| BatchSnapshot {
                    covariates: r.covariates.rows(),
                    allocation: r.allocation.clone(),
                    outcomes: r.outcomes.as_ref().map(|y| y.iter().copied().collect()),
                    risk: r.risk.clone(),
                    flat_limit: r.flat_limit,
                })
                .collect(),
            posterior_scalars: PosteriorScalars {
                a: self.scale.0,
                b: self.scale.1,
            },
            e_sigma2: self.expected_sigma2(),
        }
    }

    /// Restores a session, replaying its history and checking the stored
    /// accumulated state against the replay.
    pub fn from_snapshot(s: &SessionSnapshot) -> Result<SequentialSession> {
        if s.version != SNAPSHOT_VERSION {
            return Err(AllocError::InvalidInput(format!(
                "unsupported session snapshot version {}",
                s.version
            )));
        }
        let prior = s.prior.to_prior(s.p)?;
        let history = s
            .history
            .iter()
            .map(|b| {
                Ok(BatchRecord {
                    covariates: if b.covariates.is_empty() {
                        CovariateMatrix::empty(s.p)?
                    } else {
                        CovariateMatrix::from_rows(&b.covariates)?
                    },
                    allocation: b.allocation.clone(),
                    outcomes: b.outcomes.as_ref().map(|y| DVector::from_column_slice(y)),
                    risk: b.risk.clone(),
                    flat_limit: b.flat_limit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let session = Self::replay(&prior, &history)?;
        let stored = ArmTotals {
            n_c: s.accumulated.l_c,
            n_t: s.accumulated.l_t,
            sum_c: DVector::from_column_slice(&s.accumulated.sum_c),
            sum_t: DVector::from_column_slice(&s.accumulated.sum_t),
            gram: matrix_from_rows(&s.accumulated.gram, s.p, s.p, "gram")?,
        };
        let t = &session.totals;
        let consistent = (stored.n_c, stored.n_t) == (t.n_c, t.n_t)
            && stored.sum_c.len() == s.p
            && stored.sum_t.len() == s.p
            && max_abs_diff(&stored.gram, &t.gram) <= REPLAY_TOL * (1.0 + t.gram.amax())
            && (&stored.sum_c - &t.sum_c).amax() <= REPLAY_TOL * (1.0 + t.sum_c.amax())
            && (&stored.sum_t - &t.sum_t).amax() <= REPLAY_TOL * (1.0 + t.sum_t.amax());
        if !consistent {
            return Err(AllocError::InvalidInput(
                "stored accumulated state disagrees with the replayed history".into(),
            ));
        }
        Ok(session)
    }
}

/// Versioned JSON form of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub version: u32,
    pub prior: PriorSpec,
    pub p: usize,
    pub accumulated: AccumulatedSnapshot,
    pub history: Vec<BatchSnapshot>,
    pub posterior_scalars: PosteriorScalars,
    pub e_sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedSnapshot {
    pub l_c: usize,
    pub l_t: usize,
    pub sum_c: Vec<f64>,
    pub sum_t: Vec<f64>,
    pub gram: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSnapshot {
    pub covariates: Vec<Vec<f64>>,
    pub allocation: Allocation,
    pub outcomes: Option<Vec<f64>>,
    pub risk: Option<RiskBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flat_limit: Option<FlatLimit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorScalars {
    pub a: f64,
    pub b: f64,
}
