//! Equal-split sufficiency test under the flat prior.
//!
//! With centered `X`, the optimal allocation has `n_C = n_T` whenever some
//! equal split satisfies `(w - 1/2)' H(X) (w - 1/2) <= 1/n`, where
//! `H(X) = X (X'X)^-1 X'`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    enumerate_allocations, optimize, GroupSizeConstraint, OptimizerConfig, DEFAULT_EXHAUSTIVE_LIMIT,
};
use crate::error::{AllocError, Result};
use crate::linalg::SpdFactor;
use crate::model::{Allocation, CovariateMatrix, NigPrior};

/// Which Gram matrix the hat projection is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HatBasis {
    /// Column-centered `X`, the form the sufficiency argument relies on.
    Centered,
    /// Raw `X` as given.
    Uncentered,
}

/// Precomputed hat projection for repeated quadratic forms.
#[derive(Clone, Debug)]
pub struct HatForm {
    x: DMatrix<f64>,
    factor: SpdFactor,
}

impl HatForm {
    pub fn new(x: &CovariateMatrix, basis: HatBasis) -> Result<Self> {
        let (m, gram) = match basis {
            HatBasis::Centered => {
                let mut m = x.matrix().clone();
                for mut row in m.row_iter_mut() {
                    row -= x.means().transpose();
                }
                (m, x.scatter().clone())
            }
            HatBasis::Uncentered => (x.matrix().clone(), x.gram().clone()),
        };
        let factor = SpdFactor::new(&gram).ok_or(AllocError::SingularGram)?;
        Ok(Self { x: m, factor })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// `(w - 1/2)' H (w - 1/2)`.
    pub fn evaluate(&self, alloc: &Allocation) -> Result<f64> {
        self.evaluate_slice(alloc.as_slice())
    }

    fn evaluate_slice(&self, w: &[u8]) -> Result<f64> {
        if w.len() != self.n() {
            return Err(AllocError::LengthMismatch {
                expected: self.n(),
                actual: w.len(),
            });
        }
        let c = DVector::from_iterator(w.len(), w.iter().map(|&v| f64::from(v) - 0.5));
        Ok(self.factor.inv_quadratic(&(self.x.transpose() * c)).max(0.0))
    }
}

/// Hat quadratic form on column-centered `X`.
pub fn hat_quadratic_form(x: &CovariateMatrix, alloc: &Allocation) -> Result<f64> {
    HatForm::new(x, HatBasis::Centered)?.evaluate(alloc)
}

pub fn hat_quadratic_form_with(x: &CovariateMatrix, alloc: &Allocation, basis: HatBasis) -> Result<f64> {
    HatForm::new(x, basis)?.evaluate(alloc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualSplitOptions {
    /// Largest `n` searched exhaustively; above it a swap local search runs.
    pub exhaustive_limit: usize,
    /// Also run the exhaustive free-size optimizer and fill `optimal_is_equal`.
    pub check_optimum: bool,
    pub restarts: usize,
    pub rng_seed: u64,
}

impl Default for EqualSplitOptions {
    fn default() -> Self {
        Self {
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
            check_optimum: true,
            restarts: 20,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualSplitReport {
    /// `1/n`.
    pub threshold: f64,
    /// Smallest centered quadratic form over the equal splits searched.
    pub min_qform: f64,
    pub witness: Allocation,
    pub condition_met: bool,
    /// Smallest quadratic form on uncentered `X`, when its Gram is invertible.
    pub min_qform_uncentered: Option<f64>,
    pub uncentered_witness: Option<Allocation>,
    /// Whether some free-size risk minimizer is an equal split.
    pub optimal_is_equal: Option<bool>,
    pub optimal_alloc: Option<Allocation>,
    /// The minimum came from local search rather than full enumeration.
    pub heuristic: bool,
    pub splits_evaluated: u64,
}

/// Minimum of the hat form over equal splits, with its lexicographically
/// smallest witness among the members with `w[0] = 0`.
fn min_over_equal_splits(
    form: &HatForm,
    opts: &EqualSplitOptions,
) -> Result<(f64, Allocation, u64, bool)> {
    let n = form.n();
    if n <= opts.exhaustive_limit {
        // The form is invariant under w -> 1 - w, so half the splits suffice.
        let splits = enumerate_allocations(n, &GroupSizeConstraint::Equal, true, opts.exhaustive_limit)?;
        let mut best: Option<(f64, Allocation)> = None;
        let mut count = 0;
        for w in splits {
            count += 1;
            let q = form.evaluate(&w)?;
            if best.as_ref().is_none_or(|(b, _)| q < *b) {
                best = Some((q, w));
            }
        }
        let (q, w) = best.expect("n >= 2 has an equal split");
        return Ok((q, w, count, false));
    }
    let (q, w, count) = swap_search(form, opts)?;
    Ok((q, w, count, true))
}

/// First-improvement pair-swap descent from random equal splits.
fn swap_search(form: &HatForm, opts: &EqualSplitOptions) -> Result<(f64, Allocation, u64)> {
    let n = form.n();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut best: Option<(f64, Allocation)> = None;
    let mut count = 0u64;
    for _ in 0..opts.restarts.max(1) {
        let mut w: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
        w.shuffle(&mut rng);
        let mut q = form.evaluate_slice(&w)?;
        count += 1;
        loop {
            let mut improved = false;
            for i in 0..n {
                for j in i + 1..n {
                    if w[i] == w[j] {
                        continue;
                    }
                    w.swap(i, j);
                    let cand = form.evaluate_slice(&w)?;
                    count += 1;
                    if cand < q {
                        q = cand;
                        improved = true;
                    } else {
                        w.swap(i, j);
                    }
                }
            }
            if !improved {
                break;
            }
        }
        let mut alloc = Allocation::new(w)?;
        if alloc.as_slice()[0] == 1 {
            alloc = alloc.complement();
        }
        let better = match &best {
            None => true,
            Some((b, bw)) => q < *b || (q == *b && alloc < *bw),
        };
        if better {
            best = Some((q, alloc));
        }
    }
    let (q, w) = best.expect("at least one restart");
    Ok((q, w, count))
}

/// Searches the equal splits of `x` for one meeting the `1/n` bound.
pub fn equal_split_condition(x: &CovariateMatrix, opts: &EqualSplitOptions) -> Result<EqualSplitReport> {
    let n = x.n();
    if n % 2 == 1 {
        return Err(AllocError::OddN(n));
    }
    if n == 0 {
        return Err(AllocError::InvalidInput("no units".into()));
    }
    let centered = HatForm::new(x, HatBasis::Centered)?;
    let (min_qform, witness, splits_evaluated, heuristic) = min_over_equal_splits(&centered, opts)?;
    let threshold = 1.0 / n as f64;

    let (min_qform_uncentered, uncentered_witness) = match HatForm::new(x, HatBasis::Uncentered) {
        Ok(raw) => {
            let (q, w, _, _) = min_over_equal_splits(&raw, opts)?;
            (Some(q), Some(w))
        }
        Err(AllocError::SingularGram) => (None, None),
        Err(e) => return Err(e),
    };

    let (optimal_is_equal, optimal_alloc) = if opts.check_optimum && n <= opts.exhaustive_limit {
        let prior = NigPrior::flat(x.p(), 2.0, 1.0)?;
        let cfg = OptimizerConfig {
            exhaustive_limit: opts.exhaustive_limit,
            ..OptimizerConfig::exhaustive()
        };
        let result = optimize(&prior, x, &cfg, 1.0)?;
        let equal = result.ties.iter().any(|w| 2 * w.n_t() == n);
        (Some(equal), Some(result.best_alloc))
    } else {
        (None, None)
    };

    Ok(EqualSplitReport {
        threshold,
        min_qform,
        witness,
        condition_met: min_qform <= threshold,
        min_qform_uncentered,
        uncentered_witness,
        optimal_is_equal,
        optimal_alloc,
        heuristic,
        splits_evaluated,
    })
}

const TABLE_1: [[f64; 3]; 8] = [
    [0.1, -0.8, -1.3],
    [0.5, 2.1, 1.3],
    [0.8, -0.2, 0.2],
    [-0.3, 0.3, 0.6],
    [1.1, -0.8, 0.0],
    [-0.5, 0.7, -0.7],
    [-0.8, 1.2, -0.4],
    [-0.7, 1.0, 1.4],
];

/// The 8 x 3 sample on which no equal split is optimal.
pub fn counterexample_table() -> CovariateMatrix {
    let rows: Vec<Vec<f64>> = TABLE_1.iter().map(|r| r.to_vec()).collect();
    CovariateMatrix::from_rows(&rows).expect("static table is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::risk_flat;

    fn quick() -> EqualSplitOptions {
        EqualSplitOptions {
            check_optimum: false,
            ..Default::default()
        }
    }

    #[test]
    fn table_shape_and_rows() {
        let x = counterexample_table();
        assert_eq!((x.n(), x.p()), (8, 3));
        assert_eq!(x.rows()[0], vec![0.1, -0.8, -1.3]);
        assert_eq!(x.rows()[7], vec![-0.7, 1.0, 1.4]);
    }

    #[test]
    fn table_report() {
        let r = equal_split_condition(&counterexample_table(), &EqualSplitOptions::default()).unwrap();
        assert_eq!(r.threshold, 0.125);
        assert!(!r.condition_met);
        assert_eq!(r.splits_evaluated, 35);
        assert_eq!(r.optimal_is_equal, Some(false));
        let q = r.min_qform_uncentered.unwrap();
        assert_eq!((q * 100.0).round() / 100.0, 0.24);
        assert!(r.min_qform > r.threshold);
        assert!((r.min_qform - hat_quadratic_form(&counterexample_table(), &r.witness).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn projection_matches_explicit_hat_matrix() {
        let x = counterexample_table();
        let w = Allocation::parse("0,1,1,0,1,0,0,1").unwrap();
        let raw = x.matrix();
        let h = raw * (raw.transpose() * raw).try_inverse().unwrap() * raw.transpose();
        let c = DVector::from_iterator(8, w.as_slice().iter().map(|&v| f64::from(v) - 0.5));
        let direct = c.dot(&(&h * &c));
        let q = hat_quadratic_form_with(&x, &w, HatBasis::Uncentered).unwrap();
        assert!((q - direct).abs() < 1e-12);
        assert!((&h * &h - &h).amax() < 1e-9);
    }

    #[test]
    fn duplicated_blocks_meet_the_condition() {
        let rows = vec![
            vec![0.3, 1.0],
            vec![-1.2, 0.4],
            vec![2.0, -0.5],
            vec![0.3, 1.0],
            vec![-1.2, 0.4],
            vec![2.0, -0.5],
        ];
        let x = CovariateMatrix::from_rows(&rows).unwrap();
        let r = equal_split_condition(&x, &EqualSplitOptions::default()).unwrap();
        assert!(r.min_qform < 1e-12);
        assert!(r.condition_met);
        assert_eq!(r.optimal_is_equal, Some(true));
    }

    #[test]
    fn odd_n_and_constant_column() {
        let x = CovariateMatrix::from_rows(&[vec![1.0], vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(equal_split_condition(&x, &quick()).unwrap_err().code(), "OddN");
        let x = CovariateMatrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![0.0, 5.0], vec![3.0, 5.0]])
            .unwrap();
        assert_eq!(
            hat_quadratic_form(&x, &Allocation::parse("0,1,0,1").unwrap()).unwrap_err().code(),
            "SingularGram"
        );
    }

    #[test]
    fn translation_invariant() {
        let x = counterexample_table();
        let shifted = x.translate(&DVector::from_vec(vec![3.0, -7.0, 0.5]));
        let w = Allocation::parse("1,1,0,1,0,0,0,0").unwrap();
        let a = hat_quadratic_form(&x, &w).unwrap();
        let b = hat_quadratic_form(&shifted, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn centered_form_tracks_mahalanobis() {
        // M = (n - 1) n / (n_C n_T) * qform on centered X.
        let x = counterexample_table();
        let w = Allocation::parse("1,1,0,1,0,0,0,0").unwrap();
        let q = hat_quadratic_form(&x, &w).unwrap();
        let m = risk_flat(&x, &w, 1.0).unwrap().mahalanobis.unwrap();
        assert!((m - 7.0 * 8.0 / 15.0 * q).abs() < 1e-10);
    }

    #[test]
    fn swap_search_agrees_on_small_instance() {
        let x = counterexample_table();
        let exact = equal_split_condition(&x, &quick()).unwrap();
        let heuristic = equal_split_condition(
            &x,
            &EqualSplitOptions {
                exhaustive_limit: 4,
                check_optimum: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(heuristic.heuristic);
        assert!((heuristic.min_qform - exact.min_qform).abs() < 1e-12);
    }
}
