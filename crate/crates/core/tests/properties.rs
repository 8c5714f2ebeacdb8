use bilevel_dual::checks::random_quadratic;
use bilevel_dual::dual::eval_rdf;
use bilevel_dual::experiments::result::fmt_f64;
use bilevel_dual::homotopy::Schedule;
use bilevel_dual::inner::{solve_lower, InnerOptions};
use bilevel_dual::sweep::{run_indexed, run_sequential};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_value_grows_with_mu(seed in any::<u64>(), strict in any::<bool>(), lo in 0.0..1e-3f64, gap in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_quadratic(&mut rng, strict);
        let x = [0.3, -0.2];
        let lambda = vec![0.5; p.constraint_count()];
        let a = eval_rdf(&p, &x, &lambda, lo).unwrap().value;
        let b = eval_rdf(&p, &x, &lambda, lo + gap).unwrap().value;
        prop_assert!(b >= a - 1e-10, "{a} > {b}");
    }

    #[test]
    fn weak_duality(seed in any::<u64>(), l in proptest::collection::vec(0.0..3.0f64, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_quadratic(&mut rng, true);
        let x = [-0.1, 0.4];
        let lambda = &l[..p.constraint_count()];
        let primal = solve_lower(&p, &x, &InnerOptions::default()).unwrap();
        prop_assert!(p.lower_constraints(&x, &primal.y_star).iter().all(|&g| g <= 1e-7));
        let h = eval_rdf(&p, &x, lambda, 0.0).unwrap().value;
        prop_assert!(h <= primal.value + 1e-6, "h = {h}, primal = {}", primal.value);
    }

    #[test]
    fn printed_floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn schedule_is_exactly_geometric(k in 1usize..8, e in 0.01..10.0f64) {
        let s = Schedule { epsilon0: e, mu0: 1e-4, gamma: 0.5, zeta: 0.25, k };
        let t = s.tolerances();
        prop_assert_eq!(t.len(), k);
        for (i, (eps, mu)) in t.iter().enumerate() {
            // powers of two are exact
            prop_assert_eq!(*eps, e * 0.5f64.powi(i as i32));
            prop_assert_eq!(*mu, 1e-4 * 0.25f64.powi(i as i32));
        }
    }

    #[test]
    fn sweep_matches_sequential(count in 0usize..40, jobs in 0usize..5) {
        let f = |i: usize| (i as f64).sqrt().to_bits();
        prop_assert_eq!(run_indexed(count, jobs, f), run_sequential(count, f));
    }
}
