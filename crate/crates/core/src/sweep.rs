//! Seeded random instances and formula-vs-oracle sweeps.
//!
//! Shared by the self-test command and the acceptance suite so both check
//! exactly the same cases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Allocation, CovariateMatrix, NigPrior, PriorDecomposition};
use crate::oracle::risk_direct;
use crate::risk::{risk_flat, risk_general, risk_pseudo_sample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Covariates with i.i.d. standard normal entries.
pub fn random_covariates<R: Rng>(rng: &mut R, n: usize, p: usize) -> CovariateMatrix {
    CovariateMatrix::new(normal_matrix(rng, n, p)).expect("finite draws")
}

/// Decomposition with random positive `h`, normal `B` and an upper
/// triangular `D` with diagonal bounded away from zero.
pub fn random_decomposition<R: Rng>(rng: &mut R, p: usize) -> PriorDecomposition {
    let h1 = rng.random_range(0.3..2.0);
    let h2 = rng.random_range(0.3..2.0);
    random_decomposition_with_h(rng, p, h1, h2)
}

/// Decomposition with `h1^2` and `h2^2` drawn from `{1, 4, 9}`.
pub fn random_integer_decomposition<R: Rng>(rng: &mut R, p: usize) -> PriorDecomposition {
    let choices = [1.0, 2.0, 3.0];
    let h1 = choices[rng.random_range(0..3)];
    let h2 = choices[rng.random_range(0..3)];
    random_decomposition_with_h(rng, p, h1, h2)
}

fn random_decomposition_with_h<R: Rng>(rng: &mut R, p: usize, h1: f64, h2: f64) -> PriorDecomposition {
    let b = normal_matrix(rng, 2, p) * 0.7;
    let mut d = normal_matrix(rng, p, p) * 0.4;
    for i in 0..p {
        for j in 0..i {
            d[(i, j)] = 0.0;
        }
        d[(i, i)] = rng.random_range(0.4..1.6);
    }
    PriorDecomposition::new(h1, h2, b, d).expect("valid by construction")
}

/// Proper prior with random mean and scale built from a random decomposition.
pub fn random_prior<R: Rng>(rng: &mut R, p: usize) -> (NigPrior, PriorDecomposition) {
    let decomp = random_decomposition(rng, p);
    let zeta0 = DVector::from_fn(p + 2, |_, _| StandardNormal.sample(rng));
    let a0 = rng.random_range(1.5..5.0);
    let b0 = rng.random_range(0.5..3.0);
    let prior = NigPrior::from_decomposition(&decomp, zeta0, a0, b0).expect("valid by construction");
    (prior, decomp)
}

/// Largest relative deviation found by a sweep, and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub instances: usize,
    pub comparisons: u64,
    pub skipped: u64,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub worst: Option<String>,
}

impl SweepReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances: 0,
            comparisons: 0,
            skipped: 0,
            max_rel_dev: 0.0,
            tolerance,
            worst: None,
        }
    }

    fn record(&mut self, got: f64, want: f64, context: impl FnOnce() -> String) {
        self.comparisons += 1;
        let dev = (got - want).abs() / want.abs();
        if !(dev <= self.max_rel_dev) {
            self.max_rel_dev = if dev.is_nan() { f64::INFINITY } else { dev };
            self.worst = Some(context());
        }
    }

    pub fn passed(&self) -> bool {
        self.comparisons > 0 && self.max_rel_dev <= self.tolerance
    }
}

pub fn all_allocations(n: usize) -> impl Iterator<Item = Allocation> {
    (0..1u64 << n).map(move |m| Allocation::from_mask(m, n))
}

/// General-prior formula against direct inversion over every allocation.
pub fn oracle_sweep(seed: u64, instances: usize) -> Result<SweepReport> {
    let mut rng = rng(seed);
    let mut report = SweepReport::new("general_vs_direct", 1e-9);
    for i in 0..instances {
        let n = rng.random_range(4..=10);
        let p = rng.random_range(1..=3);
        let (prior, decomp) = random_prior(&mut rng, p);
        let x = random_covariates(&mut rng, n, p);
        let e = prior.expected_sigma2();
        for w in all_allocations(n) {
            let got = risk_general(&decomp, &x, &w, e)?.risk;
            let want = risk_direct(&prior, &x, &w)?;
            report.record(got, want, || format!("instance {i}, n={n}, p={p}, w={w}"));
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Pseudo-sample route against the general formula for integer `h^2`.
pub fn pseudo_sample_sweep(seed: u64, instances: usize) -> Result<SweepReport> {
    let mut rng = rng(seed);
    let mut report = SweepReport::new("pseudo_sample_vs_general", 1e-10);
    for i in 0..instances {
        let n = rng.random_range(4..=10);
        let p = rng.random_range(1..=3);
        let decomp = random_integer_decomposition(&mut rng, p);
        let x = random_covariates(&mut rng, n, p);
        for w in all_allocations(n) {
            let got = risk_pseudo_sample(&decomp, &x, &w, 1.0)?.risk;
            let want = risk_general(&decomp, &x, &w, 1.0)?.risk;
            report.record(got, want, || format!("instance {i}, n={n}, p={p}, w={w}"));
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Flat-prior formula against direct inversion of `Z'Z`, over every
/// allocation with a full-rank design.
pub fn flat_sweep(seed: u64, instances: usize) -> Result<SweepReport> {
    let mut rng = rng(seed);
    let mut report = SweepReport::new("flat_vs_direct", 1e-9);
    for i in 0..instances {
        let n = rng.random_range(6..=10);
        let p = rng.random_range(1..=3);
        let x = random_covariates(&mut rng, n, p);
        let prior = NigPrior::flat(p, 2.0, 1.0)?;
        for w in all_allocations(n) {
            if w.n_c() == 0 || w.n_t() == 0 {
                report.skipped += 1;
                continue;
            }
            match (risk_flat(&x, &w, 1.0), risk_direct(&prior, &x, &w)) {
                (Ok(got), Ok(want)) => {
                    report.record(got.risk, want, || format!("instance {i}, n={n}, p={p}, w={w}"))
                }
                _ => report.skipped += 1,
            }
        }
        report.instances += 1;
    }
    Ok(report)
}

/// The Mahalanobis identity `risk = n/(n_C n_T) / (1 - M/(n-1)) E[sigma^2]`
/// as an identity between fields of the flat breakdown.
pub fn mahalanobis_identity_sweep(seed: u64, instances: usize) -> Result<SweepReport> {
    let mut rng = rng(seed);
    let mut report = SweepReport::new("mahalanobis_identity", 1e-12);
    for i in 0..instances {
        let n = rng.random_range(6..=10);
        let p = rng.random_range(1..=3);
        let x = random_covariates(&mut rng, n, p);
        let e = rng.random_range(0.5..2.0);
        for w in all_allocations(n) {
            let Ok(r) = risk_flat(&x, &w, e) else {
                report.skipped += 1;
                continue;
            };
            let m = r.mahalanobis.expect("flat breakdown carries M");
            let nf = n as f64;
            let want = nf / (w.n_c() as f64 * w.n_t() as f64) / (1.0 - m / (nf - 1.0)) * e;
            report.record(r.risk, want, || format!("instance {i}, w={w}"));
        }
        report.instances += 1;
    }
    Ok(report)
}
