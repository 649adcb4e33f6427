use allocrisk::allocator::{
    enumerate_allocations, optimize, optimize_equal_split, GroupSizeConstraint, OptimizerConfig,
};
use allocrisk::balance::counterexample_table;
use allocrisk::model::NigPrior;
use allocrisk::risk::{mahalanobis, risk_for_prior};
use allocrisk::sweep::{random_covariates, random_prior, rng};
use rand::Rng;

#[test]
fn table_optimum_is_the_three_versus_five_split() {
    let x = counterexample_table();
    let flat = NigPrior::flat(3, 2.0, 1.0).unwrap();
    let res = optimize(&flat, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
    // rows 1, 2 and 4 form one arm; the dedup representative has w[0] = 0
    assert_eq!(res.best_alloc.to_string(), "0,0,1,0,1,1,1,1");
    assert!(res.label_swap_dedup);
    // 2^7 representatives, the all-control one skipped as infeasible
    assert_eq!(res.evaluated + res.skipped, 128);
    let equal = optimize_equal_split(&flat, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
    assert!(res.best_risk.risk < equal.best_risk.risk);
}

#[test]
fn exhaustive_optimum_is_never_beaten() {
    let mut r = rng(40);
    for _ in 0..10 {
        let n = r.random_range(4..=10);
        let p = r.random_range(1..=3);
        let (prior, _) = random_prior(&mut r, p);
        let x = random_covariates(&mut r, n, p);
        let res = optimize(&prior, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
        for w in enumerate_allocations(n, &GroupSizeConstraint::Free, false, 22).unwrap() {
            let risk = risk_for_prior(&prior, &x, &w, 1.0).unwrap().risk;
            assert!(risk >= res.best_risk.risk * (1.0 - 1e-12));
        }
        assert_eq!(res.evaluated, 1 << n);
        assert!(res.ties.contains(&res.best_alloc));
    }
}

#[test]
fn local_search_recovers_the_exhaustive_optimum() {
    let mut hits = 0;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let p = r.random_range(1..=3);
        let x = random_covariates(&mut r, 10, p);
        let flat = NigPrior::flat(p, 2.0, 1.0).unwrap();
        let exact = optimize(&flat, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
        let ls = optimize(&flat, &x, &OptimizerConfig::local_search(20, seed), 1.0).unwrap();
        assert!(ls.best_risk.risk >= exact.best_risk.risk * (1.0 - 1e-12));
        if (ls.best_risk.risk - exact.best_risk.risk).abs() <= 1e-12 * exact.best_risk.risk {
            hits += 1;
        }
        let trace = ls.trace.unwrap();
        assert!(trace.windows(2).all(|t| t[1] <= t[0]));
    }
    assert!(hits >= 95, "local search matched on {hits}/100 seeds");
}

#[test]
fn fixed_size_local_search_keeps_sizes() {
    let mut r = rng(41);
    let x = random_covariates(&mut r, 12, 2);
    let (prior, _) = random_prior(&mut r, 2);
    let cfg = OptimizerConfig::local_search(5, 3).with_constraint(GroupSizeConstraint::Fixed { n_c: 5, n_t: 7 });
    let res = optimize(&prior, &x, &cfg, 1.0).unwrap();
    assert_eq!(res.best_alloc.n_t(), 7);
}

#[test]
fn best_of_k_is_bounded_by_exhaustive_and_reaches_it_with_many_draws() {
    let mut r = rng(42);
    let (prior, _) = random_prior(&mut r, 2);
    let x = random_covariates(&mut r, 5, 2);
    let exact = optimize(&prior, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
    let few = optimize(&prior, &x, &OptimizerConfig::best_of_k(3, 1), 1.0).unwrap();
    assert!(few.best_risk.risk >= exact.best_risk.risk * (1.0 - 1e-12));
    let many = optimize(&prior, &x, &OptimizerConfig::best_of_k(2000, 1), 1.0).unwrap();
    assert_eq!(many.best_alloc, exact.best_alloc);
}

#[test]
fn identical_configs_give_identical_results() {
    let mut r = rng(43);
    let x = random_covariates(&mut r, 14, 2);
    let flat = NigPrior::flat(2, 2.0, 1.0).unwrap();
    for cfg in [
        OptimizerConfig::local_search(8, 77),
        OptimizerConfig::best_of_k(300, 77),
        OptimizerConfig::exhaustive(),
    ] {
        let a = optimize(&flat, &x, &cfg, 1.0).unwrap();
        let b = optimize(&flat, &x, &cfg, 1.0).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn equal_split_argmin_is_the_mahalanobis_argmin() {
    let mut r = rng(44);
    for _ in 0..10 {
        let x = random_covariates(&mut r, 8, 2);
        let flat = NigPrior::flat(2, 2.0, 1.0).unwrap();
        let res = optimize_equal_split(&flat, &x, &OptimizerConfig::exhaustive(), 1.0).unwrap();
        let best_m = enumerate_allocations(8, &GroupSizeConstraint::Equal, false, 22)
            .unwrap()
            .map(|w| mahalanobis(&x, &w).unwrap())
            .fold(f64::INFINITY, f64::min);
        let m = mahalanobis(&x, &res.best_alloc).unwrap();
        assert!((m - best_m).abs() <= 1e-10 * best_m.max(1.0));
    }
}

#[test]
fn infeasible_constraints_are_reported() {
    let x = counterexample_table();
    let flat = NigPrior::flat(3, 2.0, 1.0).unwrap();
    let cfg = OptimizerConfig::exhaustive().with_constraint(GroupSizeConstraint::Fixed { n_c: 0, n_t: 8 });
    let err = optimize(&flat, &x, &cfg, 1.0).unwrap_err();
    assert!(err.is_infeasible());
    let cfg = OptimizerConfig::exhaustive().with_constraint(GroupSizeConstraint::Fixed { n_c: 3, n_t: 3 });
    assert!(optimize(&flat, &x, &cfg, 1.0).unwrap_err().is_infeasible());
}
