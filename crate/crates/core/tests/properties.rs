//! Property tests for the structural invariants of every module.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use protosel_core::harness::{generate_design, linear_response, run_experiment, ExperimentConfig, LambdaSpec, ResultRow};
use protosel_core::likelihood::PrototypeLikelihood;
use protosel_core::linalg::{log_det_g, make_hat, sherman_morrison_inverse, GTheta, HatKind, HatOperator};
use protosel_core::multivariate::{alr_multivariate, elr_multivariate, ConditionedNull, MultiSelection};
use protosel_core::rng;
use protosel_core::sampler::{hit_and_run, HitAndRunConfig};
use protosel_core::selection::{lasso_event, lasso_fixed_lambda, marginal_screen_event, SelectionEvent};
use protosel_core::truncation::{f_truncation_region, norm_bounds};
use protosel_core::univariate::{alr_from_quad, elr_from_quad, elr_statistic, run_univariate_test, UniMethod, UnivariateOptions};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, &[]);
    DMatrix::from_fn(rows, cols, |_, _| rng::normal(&mut r))
}

fn vector(n: usize, seed: u64) -> DVector<f64> {
    gaussian(n, 1, seed).column(0).into_owned()
}

/// Projection hats on `k` random groups of `m` columns each.
fn projection_hats(n: usize, k: usize, m: usize, seed: u64) -> Vec<HatOperator> {
    (0..k)
        .map(|g| make_hat(&gaussian(n, m, seed.wrapping_add(g as u64)), HatKind::LeastSquares).unwrap())
        .collect()
}

/// A feasible theta scaled to `frac` of the boundary along a random direction.
fn feasible_theta(hats: &[HatOperator], frac: f64, seed: u64) -> DVector<f64> {
    let dir = vector(hats.len(), seed);
    let mut hi = 1.0;
    while GTheta::new(&(&dir * hi), hats).unwrap().is_feasible() && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if GTheta::new(&(&dir * mid), hats).unwrap().is_feasible() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dir * (lo * frac)
}

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn projection_trace_equals_rank(n in 8usize..40, m in 1usize..6, seed in any::<u64>()) {
        let m = m.min(n - 1);
        let h = make_hat(&gaussian(n, m, seed), HatKind::LeastSquares).unwrap();
        prop_assert_eq!(h.rank(), m);
        prop_assert!((h.trace() - m as f64).abs() < 1e-9);
        let d = h.dense();
        prop_assert!((&d * &d - &d).norm() < 1e-9);
    }

    #[test]
    fn ridge_eigenvalues_in_unit_interval(n in 8usize..30, m in 1usize..12, lambda in 1e-3f64..100.0, seed in any::<u64>()) {
        let h = make_hat(&gaussian(n, m, seed), HatKind::Ridge { lambda }).unwrap();
        let eig = SymmetricEigen::new(h.dense()).eigenvalues;
        for &e in eig.iter() {
            prop_assert!(e > -1e-12 && e <= 1.0 + 1e-12, "{}", e);
        }
        prop_assert!(h.weights().iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn sherman_morrison_inverts_g(n in 6usize..50, k in 1usize..4, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let m = (n / (2 * k)).clamp(1, 4);
        let hats = projection_hats(n, k, m, seed);
        let theta = feasible_theta(&hats, frac, seed ^ 1);
        let g = GTheta::new(&theta, &hats).unwrap();
        let inv = sherman_morrison_inverse(&g).unwrap();
        prop_assert!((inv * g.dense() - DMatrix::identity(n, n)).norm() < 1e-8);
    }

    #[test]
    fn log_det_is_concave_on_segments(n in 8usize..30, k in 1usize..4, seed in any::<u64>()) {
        let hats = projection_hats(n, k, 2, seed);
        let a = feasible_theta(&hats, 0.95, seed ^ 2);
        let b = feasible_theta(&hats, 0.95, seed ^ 3);
        let mid = (&a + &b) * 0.5;
        let f = |t: &DVector<f64>| log_det_g(&GTheta::new(t, &hats).unwrap()).unwrap();
        prop_assert!(f(&mid) >= 0.5 * (f(&a) + f(&b)) - 1e-10);
    }

    #[test]
    fn negative_loglik_hessian_is_psd(n in 10usize..40, k in 1usize..4, frac in 0.0f64..0.9, intercept in any::<bool>(), seed in any::<u64>()) {
        let hats = projection_hats(n, k, 2, seed);
        let theta = feasible_theta(&hats, frac, seed ^ 4);
        let pl = PrototypeLikelihood::new(hats, vector(n, seed ^ 5), 1.0, intercept).unwrap();
        let (_, h) = pl.grad_hess(&theta).unwrap();
        let min = SymmetricEigen::new(h).eigenvalues.min();
        prop_assert!(min >= -1e-8, "{}", min);
    }

    #[test]
    fn fit_properties(n in 15usize..50, k in 2usize..4, intercept in any::<bool>(), seed in any::<u64>()) {
        let hats = projection_hats(n, k, 2, seed);
        let pl = PrototypeLikelihood::new(hats, vector(n, seed ^ 6).add_scalar(0.5), 1.0, intercept).unwrap();
        let full = pl.fit_mle().unwrap();
        let restricted = pl.fit_mle_restricted(&[0]).unwrap();
        prop_assert!(full.loglik_at_opt >= restricted.loglik_at_opt - 1e-10);
        if full.converged {
            prop_assert!(full.gradient_norm_final < 1e-8);
            let (g, _) = pl.grad_hess(&full.theta_hat).unwrap();
            prop_assert!(g.norm() < 1e-8);
        }
        if intercept {
            let gy = GTheta::new(&full.theta_hat, pl.hats()).unwrap().apply(pl.y());
            prop_assert!((gy.add_scalar(-full.mu_hat)).sum().abs() < 1e-10 * (1.0 + gy.norm() * (n as f64).sqrt()));
        }
    }

    #[test]
    fn lasso_event_contains_its_response(n in 10usize..40, p in 2usize..10, lambda in 0.05f64..2.0, signal in 0.0f64..3.0, seed in any::<u64>()) {
        let x = gaussian(n, p, seed);
        let y = x.column(0) * signal + vector(n, seed ^ 7);
        let sel = lasso_fixed_lambda(&x, &y, lambda, 0).unwrap();
        let ev = lasso_event(&sel, &x, lambda).unwrap();
        prop_assert!(ev.min_slack(&y) >= -1e-8);
        let (_, screen) = marginal_screen_event(&x, &y).unwrap();
        prop_assert!(screen.min_slack(&y) >= -1e-8);
    }

    #[test]
    fn stacked_events_are_intersections(n in 30usize..60, seed in any::<u64>()) {
        let d = generate_design(n, &[4, 5, 3], 0.2, seed).unwrap();
        let y = linear_response(&d, &DVector::from_fn(12, |j, _| if j % 4 == 0 { 1.0 } else { 0.0 }), 1.0, seed ^ 8).unwrap();
        let events: Vec<SelectionEvent> = (0..3)
            .map(|k| {
                let x = d.group_matrix(k);
                lasso_event(&lasso_fixed_lambda(&x, &y, 0.3, k).unwrap(), &x, 0.3).unwrap()
            })
            .collect();
        let stacked = SelectionEvent::stack(&events).unwrap();
        prop_assert!(stacked.min_slack(&y) >= -1e-8);
        for b in 0..20 {
            let z = &y + vector(n, seed ^ (100 + b)) * 0.05;
            let each = events.iter().all(|e| e.contains(&z, 1e-10));
            prop_assert_eq!(stacked.contains(&z, 1e-10), each);
        }
    }

    #[test]
    fn sampler_stays_feasible_and_is_deterministic(n in 8usize..25, p in 2usize..6, seed in any::<u64>()) {
        let x = gaussian(n, p, seed);
        let y = x.column(0) * 2.0 + vector(n, seed ^ 9);
        let sel = lasso_fixed_lambda(&x, &y, 0.5, 0).unwrap();
        let ev = lasso_event(&sel, &x, 0.5).unwrap();
        let target = protosel_core::sampler::ConstrainedGaussian::isotropic(DVector::zeros(n), 1.0, ev.clone());
        let hr = HitAndRunConfig::new(300, 50, seed);
        let a = hit_and_run(&target, &y, &hr).unwrap();
        let b = hit_and_run(&target, &y, &hr).unwrap();
        prop_assert_eq!(&a, &b);
        for s in a.row_iter() {
            prop_assert!(ev.min_slack(&s.transpose()) >= -1e-8);
        }
    }

    #[test]
    fn bounds_contain_observed_statistic(n in 15usize..40, p in 3usize..8, signal in 0.0f64..3.0, seed in any::<u64>()) {
        let x = gaussian(n, p, seed);
        let y = x.column(0) * signal + vector(n, seed ^ 10);
        let sel = lasso_fixed_lambda(&x, &y, 0.5, 0).unwrap();
        prop_assume!(!sel.is_empty());
        let ev = lasso_event(&sel, &x, 0.5).unwrap();
        let h = make_hat(&x.select_columns(&sel.active), HatKind::LeastSquares).unwrap();
        let b = norm_bounds(&ev, &h, &y).unwrap();
        prop_assert!(b.t_star <= b.observed_norm * (1.0 + 1e-9) + 1e-12);
        prop_assert!(b.observed_norm <= b.t_upper * (1.0 + 1e-9));
        let m = sel.active.len();
        prop_assume!(m < n);
        let c = m as f64 / (n - m) as f64;
        let region = f_truncation_region(&ev, &h, &y, c).unwrap();
        let f = protosel_core::truncation::f_statistic(&h, &y, m);
        prop_assert!(region.contains(f, 1e-8));
    }

    #[test]
    fn analytic_p_values_in_unit_interval(n in 20usize..50, p in 3usize..10, signal in 0.0f64..4.0, seed in any::<u64>()) {
        let x = generate_design(n, &[p], 0.0, seed).unwrap().group_matrix(0);
        let y = x.column(0) * signal + vector(n, seed ^ 11);
        let opts = UnivariateOptions { lambda: Some(0.5), ..UnivariateOptions::default() };
        for m in [UniMethod::ElrChi, UniMethod::AlrExact, UniMethod::Pt, UniMethod::F, UniMethod::LrAll, UniMethod::TMean, UniMethod::TPc] {
            if let Ok(r) = run_univariate_test(m, &x, &y, &opts) {
                prop_assert!((0.0..=1.0).contains(&r.p_value), "{} {}", m, r.p_value);
            }
        }
    }

    #[test]
    fn likelihood_ratios_vanish_only_at_expected_norm(m in 1usize..20, ratio in 0.01f64..5.0, sigma2 in 0.1f64..4.0) {
        let q = ratio * m as f64 * sigma2;
        let e = elr_from_quad(q, m, sigma2);
        let a = alr_from_quad(q, m, sigma2);
        if (ratio - 1.0).abs() < 1e-12 {
            prop_assert!(e.abs() < 1e-12 && a.abs() < 1e-12);
        } else {
            prop_assert!(e > 0.0 && a > 0.0);
        }
        let q0 = m as f64 * sigma2;
        prop_assert!(elr_from_quad(q0, m, sigma2).abs() < 1e-9 && alr_from_quad(q0, m, sigma2).abs() < 1e-12);
    }

    #[test]
    fn pt_is_sign_symmetric(n in 20usize..50, p in 2usize..8, seed in any::<u64>()) {
        let x = generate_design(n, &[p], 0.0, seed).unwrap().group_matrix(0);
        let y = x.column(1) * 1.5 + vector(n, seed ^ 12);
        let opts = UnivariateOptions::default();
        let a = run_univariate_test(UniMethod::Pt, &x, &y, &opts).unwrap();
        let b = run_univariate_test(UniMethod::Pt, &x, &(-&y), &opts).unwrap();
        prop_assert!((a.p_value - b.p_value).abs() < 1e-10);
    }

    #[test]
    fn multivariate_statistics_nonnegative_and_reduce(n in 20usize..40, k in 1usize..4, seed in any::<u64>()) {
        let hats = projection_hats(n, k, 2, seed);
        let y = vector(n, seed ^ 13) * 1.3;
        prop_assert!(alr_multivariate(&y, &hats, 1.0, 0).unwrap() >= -1e-10);
        let e = elr_multivariate(&y, &hats, 1.0, 0).unwrap();
        prop_assert!(e.statistic >= -1e-10);
        if k == 1 {
            let uni = elr_statistic(&y, &hats[0], 2, 1.0).unwrap();
            prop_assert!((e.statistic - uni).abs() < 1e-8 * (1.0 + uni), "{} vs {}", e.statistic, uni);
        }
    }

    #[test]
    fn conditioned_samples_satisfy_original_constraints(seed in any::<u64>()) {
        let d = generate_design(40, &[5, 5, 5], 0.0, seed).unwrap();
        let beta = DVector::from_fn(15, |j, _| if j % 5 == 0 { 2.0 } else { 0.0 });
        let y = linear_response(&d, &beta, 1.0, seed ^ 14).unwrap();
        let sel = MultiSelection::fit(&d, &y, &[0.4, 0.4, 0.4]).unwrap();
        let others: Vec<usize> = (1..3).flat_map(|k| sel.selected_columns(&d, k)).collect();
        let cond = ConditionedNull::build(&sel.event, &d.columns(&others), &y).unwrap();
        let draws = hit_and_run(&cond.target(1.0), &cond.start, &HitAndRunConfig::new(200, 50, seed)).unwrap();
        for eps in draws.row_iter() {
            let yt = cond.response(&eps.transpose());
            prop_assert!(sel.event.min_slack(&yt) >= -1e-8);
        }
    }
}

fn strip(rows: &[ResultRow]) -> Vec<ResultRow> {
    rows.iter().map(|r| ResultRow { wall_ms: 0.0, ..r.clone() }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn experiments_are_deterministic_and_recount(seed in any::<u64>(), scale in 0.01f64..0.03) {
        let mut cfg = ExperimentConfig::preset("table2-single").unwrap().scaled(scale).unwrap();
        cfg.seed = seed;
        cfg.hr_samples = 300;
        cfg.hr_burn_in = 50;
        cfg.lambda = LambdaSpec::Calibrated { target: 5, trials: 5 };
        let reps = cfg.replications;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        prop_assert_eq!(strip(&a.rows), strip(&b.rows));
        prop_assert_eq!(a.rows.len(), reps * cfg.methods.len());
        prop_assert_eq!(a.summary.config.hr_samples, 300);
        for m in &cfg.methods {
            let p = a.p_values(m);
            for alpha in [0.05, 0.1] {
                let rate = p.iter().filter(|&&v| v <= alpha).count() as f64 / p.len() as f64;
                prop_assert_eq!(a.summary.power(m, alpha).unwrap(), rate);
            }
        }
    }
}
