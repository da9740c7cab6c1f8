use lmk::harness::{trace_csv, verify_result, CheckStatus, CHECK_LOPING};
use lmk::kaczmarz::*;
use lmk::linop::{adjoint_test, solve_regularized_normal, DenseMap, IdentityMap, InnerSolvePolicy, LinearMap};
use lmk::model::{make_noisy_data, OperatorFamily};
use lmk::problems::{build_elliptic_1d, make_experiment_instance, smooth_perturbations, EllipticOptions};
use lmk::vector::{distance, norm};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn config(family: &dyn OperatorFamily, x0: &[f64], tau: Option<f64>, safety: f64) -> SolverConfig {
    let mut cfg = SolverConfig::for_family(family, x0, tau, safety).unwrap();
    cfg.max_cycles = 400;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selected_parameters_are_strictly_feasible(
        eta in 0.0f64..0.9,
        c in 1e-3f64..1e3,
        safety in 1.0f64..4.0,
        tau_scale in prop::option::of(1.01f64..5.0),
    ) {
        let lower = (1.0 + eta) / (1.0 - eta);
        let tau = tau_scale.map(|s| s * lower);
        let p = select_parameters(eta, c, tau, safety).unwrap();
        prop_assert!(p.tau > lower);
        let q_lo = eta + (1.0 + eta) / p.tau;
        prop_assert!(q_lo < p.q && p.q < 1.0);
        prop_assert!(p.alpha > c * c * p.q / (1.0 - p.q));
        prop_assert!(check_feasibility(eta, c, p.tau, p.q, p.alpha).is_ok());
    }

    #[test]
    fn tau_at_or_below_the_bound_is_rejected(eta in 0.0f64..0.9, shrink in 0.2f64..=1.0) {
        let tau = shrink * (1.0 + eta) / (1.0 - eta);
        let err = select_parameters(eta, 1.0, Some(tau), 1.05).unwrap_err();
        let is_tau_error = matches!(err, ParameterError::TauTooSmall { .. } | ParameterError::EmptyQInterval { .. });
        prop_assert!(is_tau_error);
    }

    #[test]
    fn residual_matching_recovers_identity_closed_form(q in 0.05f64..0.95, scale in 1e-3f64..1e3) {
        // For A = I: ‖α/(1+α) r‖ = q‖r‖ at α = q/(1−q).
        let map = IdentityMap { dim: 5 };
        let r: Vec<f64> = (0..5).map(|j| scale * (j as f64 + 1.0)).collect();
        let choice = residual_matched_alpha(&map, &r, q, (1e-8, 1e8), 1e-10).unwrap();
        let expected = q / (1.0 - q);
        prop_assert!((choice.alpha - expected).abs() <= 1e-6 * expected);
    }

    #[test]
    fn bk_is_sandwiched_between_q_and_one(
        seed in any::<u64>(),
        q in 0.3f64..0.95,
        safety in 1.0f64..3.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0));
        let c = a.norm();
        let alpha = safety * c * c * q / (1.0 - q) * 1.000001;
        let map = DenseMap::new(a);
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sol = solve_regularized_normal(&map, &r, alpha, &InnerSolvePolicy::direct()).unwrap();
        let mut bk = map.apply(&sol.solution).unwrap();
        for (b, ri) in bk.iter_mut().zip(&r) {
            *b -= ri;
        }
        let (nb, nr) = (norm(&bk), norm(&r));
        prop_assert!(nb <= nr * (1.0 + 1e-12));
        prop_assert!(nb >= q * nr * (1.0 - 1e-12));
        let resolvent = bk_resolvent_form(&map, &r.iter().map(|v| -v).collect::<Vec<_>>(), alpha, &InnerSolvePolicy::direct()).unwrap();
        prop_assert!(distance(&resolvent, &bk) <= 1e-10 * nr);
    }

    #[test]
    fn noise_has_exactly_the_declared_level(rel in 0.0f64..0.2, seed in any::<u64>()) {
        let y: Vec<Vec<f64>> = (0..4).map(|i| (0..7).map(|j| ((i * 7 + j) as f64).sin() + 0.1).collect()).collect();
        let data = make_noisy_data(&y, rel, seed).unwrap();
        for (i, yi) in y.iter().enumerate() {
            prop_assert!((data.delta[i] - rel * norm(yi)).abs() <= 1e-15 * norm(yi));
        }
        prop_assert!(data.noise_model_deviation().unwrap() <= 1e-12 * rel.max(1e-300) + 1e-15);
        prop_assert_eq!(data.is_exact(), rel == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noisy_runs_lope_correctly_and_decrease_the_error(
        seed in 0u64..1000,
        noise in 0.01f64..0.1,
        safety in 1.0f64..3.0,
    ) {
        let inst = make_experiment_instance("block-linear-16", noise, seed).unwrap();
        let fam = inst.family();
        let truth = fam.metadata().ground_truth.clone().unwrap();
        let cfg = config(fam, &inst.x0, None, safety);
        let res = run_llmk(fam, &inst.data, &inst.x0, &cfg).unwrap();
        prop_assert_eq!(res.stop_reason, StopReason::DiscrepancyCycle);
        prop_assert!(stopping_sound(&res));
        let iterates = res.iterates.as_ref().unwrap();
        for (k, rec) in res.trace.iter().enumerate() {
            prop_assert_eq!(rec.omega == 1, rec.residual_norm >= cfg.tau * rec.delta);
            if rec.omega == 0 {
                prop_assert_eq!(&iterates[k], &iterates[k + 1]);
            }
        }
        let mono = verify_monotonicity(&res, &truth).unwrap();
        prop_assert!(mono.passed(), "{:?}", mono.violations);
        prop_assert!(mono.estimate_violations.is_empty());
        let text = String::from_utf8(trace_csv(&res)).unwrap();
        prop_assert_eq!(text.lines().count(), res.stop_index + 2);
        prop_assert_eq!(res.stop_index % fam.n_equations(), 0);
    }

    #[test]
    fn exact_data_never_lope(
        id in prop::sample::select(vec!["block-linear-16", "elliptic1d-9loads", "elliptic1d-9loads-nodal"]),
        cycles in 1usize..6,
    ) {
        let inst = make_experiment_instance(id, 0.0, 0).unwrap();
        let fam = inst.family();
        let mut cfg = config(fam, &inst.x0, None, 1.05);
        cfg.max_cycles = cycles;
        let res = run_llmk(fam, &inst.data, &inst.x0, &cfg).unwrap();
        prop_assert!(res.all_omega_one());
        prop_assert!(res.nonloped_per_cycle.iter().all(|n| *n == fam.n_equations()));
    }

    #[test]
    fn any_flipped_omega_is_detected(seed in 0u64..200, pick in any::<prop::sample::Index>()) {
        let inst = make_experiment_instance("block-linear-16", 0.05, seed).unwrap();
        let fam = inst.family();
        let res = run_llmk(fam, &inst.data, &inst.x0, &config(fam, &inst.x0, None, 1.05)).unwrap();
        let mut bad = res.clone();
        let k = pick.index(bad.trace.len());
        bad.trace[k].omega ^= 1;
        let report = verify_result(&bad).unwrap();
        prop_assert_eq!(report.get(CHECK_LOPING).unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn elliptic_linearizations_are_adjoint_consistent(seed in any::<u64>(), radius in 0.0f64..0.3) {
        let p = build_elliptic_1d(EllipticOptions::default()).unwrap();
        let truth = p.metadata().ground_truth.clone().unwrap();
        let dx = smooth_perturbations(p.dim_x(), 4, radius, 1, seed).pop().unwrap();
        let x: Vec<f64> = truth.iter().zip(&dx).map(|(a, b)| a + b).collect();
        for i in [0, 4, 8] {
            let map = p.linearize(i, &x).unwrap();
            let check = adjoint_test(map.as_ref(), 10, seed);
            prop_assert!(check.max_relative_error <= 1e-8, "{}", check.max_relative_error);
        }
    }
}
