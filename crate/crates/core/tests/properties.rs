use allocrisk::balance::hat_quadratic_form;
use allocrisk::model::{Allocation, CovariateMatrix};
use allocrisk::risk::{risk_flat, risk_general};
use allocrisk::sweep::{random_decomposition, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (CovariateMatrix, Allocation)> {
    (4usize..=9, 1usize..=3).prop_flat_map(|(n, p)| {
        (
            proptest::collection::vec(-3.0f64..3.0, n * p),
            proptest::collection::vec(0u8..=1, n),
        )
            .prop_map(move |(vals, w)| {
                (
                    CovariateMatrix::new(DMatrix::from_row_slice(n, p, &vals)).unwrap(),
                    Allocation::new(w).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn general_risk_is_positive_with_a_positive_denominator((x, w) in instance(), seed in 0u64..1000) {
        let decomp = random_decomposition(&mut rng(seed), x.p());
        let b = risk_general(&decomp, &x, &w, 1.0).unwrap();
        prop_assert!(b.risk > 0.0);
        prop_assert!(b.imbalance_quad >= 0.0);
        prop_assert!(b.imbalance_quad < b.size_term);
    }

    #[test]
    fn flat_breakdown_satisfies_the_mahalanobis_identity((x, w) in instance(), e in 0.1f64..10.0) {
        if let Ok(b) = risk_flat(&x, &w, e) {
            let n = x.n() as f64;
            let m = b.mahalanobis.unwrap();
            let want = n / (w.n_c() as f64 * w.n_t() as f64) / (1.0 - m / (n - 1.0)) * e;
            prop_assert!((b.risk - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn hat_form_is_bounded_and_translation_invariant((x, w) in instance(), shift in proptest::collection::vec(-50.0f64..50.0, 3)) {
        if let Ok(q) = hat_quadratic_form(&x, &w) {
            prop_assert!(q >= 0.0);
            prop_assert!(q <= w.len() as f64 / 4.0 + 1e-9);
            let c = DVector::from_column_slice(&shift[..x.p()]);
            let moved = hat_quadratic_form(&x.translate(&c), &w);
            if let Ok(q2) = moved {
                prop_assert!((q - q2).abs() <= 1e-7 * (1.0 + q));
            }
        }
    }

    #[test]
    fn allocation_text_round_trips(w in proptest::collection::vec(0u8..=1, 1..30)) {
        let a = Allocation::new(w).unwrap();
        prop_assert_eq!(Allocation::parse(&a.to_string()).unwrap(), a.clone());
        prop_assert_eq!(a.complement().complement(), a);
    }
}
