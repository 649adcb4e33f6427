use allocrisk::allocator::{optimize, OptimizerConfig};
use allocrisk::model::{build_design, posterior_update, Allocation, CovariateMatrix, NigPrior, PriorCovariance};
use allocrisk::oracle::risk_direct_scaled;
use allocrisk::risk::ArmTotals;
use allocrisk::sequential::{open_session, BatchRequest, SequentialSession};
use allocrisk::sweep::{all_allocations, random_covariates, random_prior, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn random_alloc<R: Rng>(r: &mut R, n: usize) -> Allocation {
    Allocation::new((0..n).map(|_| r.random_range(0..2)).collect()).unwrap()
}

#[test]
fn conditional_risk_is_the_combined_single_shot_risk() {
    let mut r = rng(60);
    for inst in 0..20 {
        let n = r.random_range(4..=8);
        let n1 = r.random_range(1..n);
        let p = r.random_range(1..=2);
        let (prior, _) = random_prior(&mut r, p);
        let x1 = random_covariates(&mut r, n1, p);
        let x2 = random_covariates(&mut r, n - n1, p);
        let x = x1.stack(&x2).unwrap();
        for w1 in all_allocations(n1) {
            let session = open_session(&prior, p).unwrap().apply_allocation(&x1, &w1).unwrap();
            let mut best_cond: Option<(f64, Allocation)> = None;
            let mut best_joint = f64::INFINITY;
            for w2 in all_allocations(n - n1) {
                let cond = session.conditional_risk(&x2, &w2).unwrap().risk;
                let joint = risk_direct_scaled(&prior, &x, &w1.concat(&w2), prior.expected_sigma2()).unwrap();
                assert!(rel(cond, joint) <= 1e-9, "instance {inst}");
                best_joint = best_joint.min(joint);
                if best_cond.as_ref().is_none_or(|(b, _)| cond < *b) {
                    best_cond = Some((cond, w2));
                }
            }
            let (_, argmin) = best_cond.unwrap();
            let at_argmin = risk_direct_scaled(&prior, &x, &w1.concat(&argmin), prior.expected_sigma2()).unwrap();
            assert!(rel(at_argmin, best_joint) <= 1e-12);
        }
    }
}

#[test]
fn chosen_batch_ignores_recorded_outcomes() {
    let mut r = rng(61);
    for _ in 0..10 {
        let p = 2;
        let (prior, _) = random_prior(&mut r, p);
        let x1 = random_covariates(&mut r, 4, p);
        let x2 = random_covariates(&mut r, 5, p);
        let w1 = random_alloc(&mut r, 4);
        let base = open_session(&prior, p).unwrap().apply_allocation(&x1, &w1).unwrap();
        let ya = DVector::from_fn(4, |_, _| r.random_range(-3.0..3.0));
        let yb = DVector::from_fn(4, |_, _| r.random_range(-30.0..30.0));
        let req = BatchRequest::new(x2.clone());
        let (none, _) = base.allocate_batch(&req).unwrap();
        let sa = base.record_outcomes(0, &ya).unwrap();
        let sb = base.record_outcomes(0, &yb).unwrap();
        let (a, _) = sa.allocate_batch(&req).unwrap();
        let (b, _) = sb.allocate_batch(&req).unwrap();
        assert_eq!(a.allocation, none.allocation);
        assert_eq!(b.allocation, none.allocation);
        let (risk_none, risk_a, risk_b) = (none.risk.unwrap(), a.risk.unwrap(), b.risk.unwrap());
        let scale_a = sa.expected_sigma2() / base.expected_sigma2();
        let scale_b = sb.expected_sigma2() / base.expected_sigma2();
        assert!(rel(risk_a.risk, risk_none.risk * scale_a) < 1e-12);
        assert!(rel(risk_b.risk, risk_none.risk * scale_b) < 1e-12);
    }
}

#[test]
fn batchwise_accumulation_equals_concatenated_design() {
    let mut r = rng(62);
    for _ in 0..20 {
        let p = r.random_range(1..=3);
        let (prior, _) = random_prior(&mut r, p);
        let n = r.random_range(2..=12);
        let x = random_covariates(&mut r, n, p);
        let w = random_alloc(&mut r, n);
        let mut cuts: Vec<usize> = (1..n).filter(|_| r.random_bool(0.4)).collect();
        cuts.insert(0, 0);
        cuts.push(n);
        let mut session = open_session(&prior, p).unwrap();
        for pair in cuts.windows(2) {
            let idx: Vec<usize> = (pair[0]..pair[1]).collect();
            let wb = Allocation::new(idx.iter().map(|&i| w.as_slice()[i]).collect()).unwrap();
            session = session.apply_allocation(&x.select(&idx), &wb).unwrap();
        }
        let single = ArmTotals::from_design(&x, &w).unwrap();
        let t = session.totals();
        assert_eq!((t.n_c, t.n_t), (single.n_c, single.n_t));
        assert!((&t.gram - &single.gram).amax() <= 1e-9);
        assert!((&t.gram - x.gram()).amax() <= 1e-9);
        assert!((&t.sum_c - &single.sum_c).amax() <= 1e-9);
        assert!((&t.sum_t - &single.sum_t).amax() <= 1e-9);
        assert!(session.replay_deviation().unwrap() <= 1e-12);
    }
}

#[test]
fn scale_update_matches_marginal_residual_form() {
    // b - b0 = 1/2 (y - Z zeta0)' (I + Z V0 Z')^-1 (y - Z zeta0)
    let mut r = rng(63);
    for _ in 0..10 {
        let p = r.random_range(1..=3);
        let (prior, _) = random_prior(&mut r, p);
        let m = r.random_range(1..=6);
        let x = random_covariates(&mut r, m, p);
        let w = random_alloc(&mut r, m);
        let y = DVector::from_fn(m, |_, _| r.random_range(-2.0..2.0));
        let s = open_session(&prior, p).unwrap().apply_allocation(&x, &w).unwrap();
        let s = s.record_outcomes(0, &y).unwrap();
        let (a, b) = s.posterior_scalars();
        let z = build_design(&x, &w).unwrap();
        let PriorCovariance::Proper(v0) = prior.covariance() else { unreachable!() };
        let resid = &y - &z * prior.zeta0();
        let marginal = DMatrix::identity(m, m) + &z * v0 * z.transpose();
        let inc = 0.5 * resid.dot(&marginal.lu().solve(&resid).unwrap());
        assert!(rel(b - prior.b0(), inc) < 1e-9);
        assert_eq!(a, prior.a0() + m as f64 / 2.0);

        let post = posterior_update(&prior, &x, &w, &y).unwrap();
        assert!(rel(b, post.b1) < 1e-12);
    }
}

#[test]
fn outcomes_on_the_prior_mean_leave_b_unchanged() {
    let mut r = rng(64);
    let (prior, _) = random_prior(&mut r, 2);
    let x = random_covariates(&mut r, 4, 2);
    let w = Allocation::parse("0,1,1,0").unwrap();
    let fitted = build_design(&x, &w).unwrap() * prior.zeta0();
    let s = open_session(&prior, 2).unwrap().apply_allocation(&x, &w).unwrap();
    let s = s.record_outcomes(0, &fitted).unwrap();
    assert!((s.posterior_scalars().1 - prior.b0()).abs() < 1e-12);
}

#[test]
fn shape_after_four_outcomes() {
    let prior = NigPrior::flat(1, 2.0, 1.0).unwrap();
    let x = CovariateMatrix::from_rows(&[vec![0.1], vec![0.5], vec![-0.3], vec![1.0]]).unwrap();
    let s = open_session(&prior, 1).unwrap().apply_allocation(&x, &Allocation::parse("0,1,0,1").unwrap()).unwrap();
    let s = s.record_outcomes(0, &DVector::from_vec(vec![1.0, 2.0, 0.0, 3.0])).unwrap();
    assert_eq!(s.posterior_scalars().0, 4.0);
}

#[test]
fn first_batch_equals_single_shot_optimum() {
    let mut r = rng(65);
    let (prior, _) = random_prior(&mut r, 2);
    let x = random_covariates(&mut r, 7, 2);
    let (d, _) = open_session(&prior, 2).unwrap().allocate_batch(&BatchRequest::new(x.clone())).unwrap();
    let single = optimize(&prior, &x, &OptimizerConfig::exhaustive(), prior.expected_sigma2()).unwrap();
    assert_eq!(d.allocation, single.best_alloc);
    assert!(rel(d.risk.unwrap().risk, single.best_risk.risk) < 1e-12);
}

#[test]
fn greedy_batches_never_beat_the_single_shot_optimum() {
    let mut r = rng(66);
    for _ in 0..10 {
        let (prior, _) = random_prior(&mut r, 2);
        let x = random_covariates(&mut r, 10, 2);
        let mut session = open_session(&prior, 2).unwrap();
        let mut last = None;
        for (lo, hi) in [(0, 4), (4, 7), (7, 10)] {
            let idx: Vec<usize> = (lo..hi).collect();
            let (d, next) = session.allocate_batch(&BatchRequest::new(x.select(&idx))).unwrap();
            session = next;
            last = Some(d.risk.unwrap().risk);
        }
        let single = optimize(&prior, &x, &OptimizerConfig::exhaustive(), prior.expected_sigma2()).unwrap();
        assert!(last.unwrap() >= single.best_risk.risk * (1.0 - 1e-12));
    }
}

#[test]
fn greedy_choice_dominates_every_feasible_batch_allocation() {
    let mut r = rng(67);
    let (prior, _) = random_prior(&mut r, 2);
    let x1 = random_covariates(&mut r, 3, 2);
    let x2 = random_covariates(&mut r, 6, 2);
    let s = open_session(&prior, 2).unwrap().apply_allocation(&x1, &Allocation::parse("1,1,0").unwrap()).unwrap();
    let (d, _) = s.allocate_batch(&BatchRequest::new(x2.clone())).unwrap();
    let chosen = d.risk.unwrap();
    for w2 in all_allocations(6) {
        assert!(s.conditional_risk(&x2, &w2).unwrap().risk >= chosen.risk * (1.0 - 1e-12));
    }
}

#[test]
fn identical_sessions_are_identical() {
    let mut r = rng(68);
    let (prior, _) = random_prior(&mut r, 2);
    let x = random_covariates(&mut r, 5, 2);
    let run = || -> SequentialSession {
        let (_, s) = open_session(&prior, 2).unwrap().allocate_batch(&BatchRequest::new(x.clone())).unwrap();
        s
    };
    assert_eq!(run(), run());
}

#[test]
fn flat_ridge_limit_matches_a_vanishing_ridge_prior() {
    // with prior precision eps I, risk(eps) = divergence / eps + finite_part + O(eps)
    let mut r = rng(69);
    for _ in 0..10 {
        let p = 2;
        let x = random_covariates(&mut r, 3, p);
        let w = random_alloc(&mut r, 3);
        let flat = NigPrior::flat(p, 2.0, 1.0).unwrap();
        let s = open_session(&flat, p).unwrap().apply_allocation(&x, &w).unwrap();
        let lim = s.history()[0].flat_limit.expect("three units never identify the contrast");
        assert!(s.history()[0].risk.is_none());
        let at = |eps: f64| {
            let ridge = NigPrior::new(DVector::zeros(p + 2), DMatrix::identity(p + 2, p + 2) / eps, 2.0, 1.0).unwrap();
            risk_direct_scaled(&ridge, &x, &w, 1.0).unwrap()
        };
        // fit eps * risk(eps) as a cubic in eps; the ridges must sit well below
        // the smallest nonzero eigenvalue of Z'Z but not so low that the
        // finite part is lost to cancellation
        let z = build_design(&x, &w).unwrap();
        let eig = (z.transpose() * &z).symmetric_eigen().eigenvalues;
        let small = eig.iter().copied().filter(|&l| l > 1e-9).fold(f64::INFINITY, f64::min);
        let eps: [f64; 4] = [0.02, 0.01, 0.005, 0.0025].map(|f| f * small);
        let vand = DMatrix::from_fn(4, 4, |i, j| eps[i].powi(j as i32));
        let g = DVector::from_fn(4, |i, _| eps[i] * at(eps[i]));
        let coef = vand.lu().solve(&g).unwrap();
        assert!(rel(coef[0], lim.divergence) < 1e-6, "{} vs {}", coef[0], lim.divergence);
        assert!((coef[1] - lim.finite_part).abs() < 1e-4 * (1.0 + lim.finite_part), "{} vs {}", coef[1], lim.finite_part);
    }
}
