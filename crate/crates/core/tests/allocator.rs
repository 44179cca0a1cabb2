mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regime_portfolio::allocator::*;
use regime_portfolio::market::{simulate_path, DEFAULT_DT};
use regime_portfolio::filter_path;

fn instance(seed: u64) -> common::AllocInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    common::random_instance(&mut rng, n)
}

fn solve(inst: &common::AllocInstance) -> DVector<f64> {
    optimal_portfolio_with(&inst.gamma, &inst.sigma, inst.zeta, &inst.omega, &inst.q, &inst.eta, RateConvention::Alpha)
        .unwrap()
        .into_inner()
}

fn covariance_prefs(zeta: Zeta) -> PreferenceSpec {
    PreferenceSpec { omega: PenaltyMatrix::Covariance, q: PenaltyMatrix::Covariance, ..Default::default() }.with_zeta(zeta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_the_kkt_solution(seed in any::<u64>()) {
        let inst = instance(seed);
        let pi = solve(&inst);
        let (a, b) = common::objective_terms(&inst);
        let oracle = common::kkt_solve(&a, &b);
        prop_assert!((pi.sum() - 1.0).abs() < 1e-10);
        prop_assert!((&pi - &oracle).amax() < 1e-9 * (1.0 + oracle.amax()));
        let g = &b - &a * &pi;
        let lagrange = g.mean();
        prop_assert!(g.add_scalar(-lagrange).amax() < 1e-8);
    }

    #[test]
    fn perturbations_lower_the_objective(seed in any::<u64>(), eps in 1e-4f64..1.0) {
        let inst = instance(seed);
        let n = inst.gamma.len();
        prop_assume!(n > 1);
        let pi = solve(&inst);
        let (a, b) = common::objective_terms(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d = DVector::from_fn(n, |_, _| common::normal(&mut rng));
        let d = d.add_scalar(-d.mean());
        let best = common::pointwise_value(&a, &b, &pi);
        prop_assert!(common::pointwise_value(&a, &b, &(&pi + d * eps)) < best);
    }

    #[test]
    fn rescaling_preferences_leaves_weights_unchanged(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let inst = instance(seed);
        let pi = solve(&inst);
        let z = inst.zeta;
        let scaled = common::AllocInstance { zeta: Zeta::new(z.zeta0 * c, z.zeta1 * c, z.zeta2 * c), ..inst.clone() };
        let pi2 = solve(&scaled);
        prop_assert!((&pi - &pi2).amax() < 1e-12 * (1.0 + pi.amax()));
    }

    #[test]
    fn corner_preferences_give_the_named_portfolios(seed in any::<u64>()) {
        let inst = instance(seed);
        let only = |z0: f64, z1: f64, z2: f64| solve(&common::AllocInstance { zeta: Zeta::new(z0, z1, z2), q: inst.sigma.clone(), ..inst.clone() });
        let g = gop(&inst.gamma, &inst.sigma).unwrap().into_inner();
        prop_assert!((only(1.0, 0.0, 0.0) - &g).amax() < 1e-10 * (1.0 + g.amax()));
        prop_assert!((only(0.0, 1.0, 0.0) - &inst.eta).amax() < 1e-10);
        let q = mqp(&inst.sigma).unwrap().into_inner();
        prop_assert!((only(0.0, 0.0, 1.0) - &q).amax() < 1e-10 * (1.0 + q.amax()));
    }

    #[test]
    fn gop_and_mqp_are_extremal(seed in any::<u64>()) {
        let inst = instance(seed);
        let n = inst.gamma.len();
        let g = gop(&inst.gamma, &inst.sigma).unwrap().into_inner();
        let q = mqp(&inst.sigma).unwrap().into_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..100 {
            let pi = common::random_feasible(&mut rng, n);
            let growth = portfolio_growth_rate(&pi, &inst.gamma, &inst.sigma);
            prop_assert!(portfolio_growth_rate(&g, &inst.gamma, &inst.sigma) >= growth - 1e-12);
            prop_assert!(q.dot(&(&inst.sigma * &q)) <= pi.dot(&(&inst.sigma * &pi)) + 1e-12);
        }
    }

    #[test]
    fn decomposition_recombines(seed in any::<u64>()) {
        let inst = instance(seed);
        let prefs = covariance_prefs(inst.zeta);
        let d = decompose(&prefs, 0, &inst.gamma, &inst.sigma, &inst.eta).unwrap();
        let pi = optimal_portfolio(&inst.gamma, &inst.sigma, &prefs, 0, &inst.eta).unwrap().into_inner();
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((d.recombine() - pi).amax() < 1e-10);
    }

    #[test]
    fn posterior_average_equals_growth_average(seed in any::<u64>(), gamma_rate in any::<bool>()) {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let n = inst.gamma.len();
        let m = rng.random_range(1..=5);
        let growths: Vec<_> = (0..m).map(|_| DVector::from_fn(n, |_, _| 0.3 * common::normal(&mut rng))).collect();
        let p = common::random_simplex(&mut rng, m);
        let convention = if gamma_rate { RateConvention::Gamma } else { RateConvention::Alpha };
        let obj = QuadraticObjective::new(&inst.gamma, &inst.sigma, inst.zeta, &inst.omega, &inst.q, &inst.eta, convention);
        let bs = per_state_b(&growths, &inst.sigma, inst.zeta, &inst.omega, &inst.eta, convention);
        let avg = posterior_average_portfolio(&p, &bs, &obj.a).unwrap().into_inner();
        let mut gamma_hat = DVector::zeros(n);
        for (w, g) in p.iter().zip(&growths) {
            gamma_hat += g * *w;
        }
        let direct = optimal_portfolio_with(&gamma_hat, &inst.sigma, inst.zeta, &inst.omega, &inst.q, &inst.eta, convention).unwrap();
        prop_assert!((avg - direct.into_inner()).amax() < 1e-10);
    }

    #[test]
    fn optimum_is_growth_optimal_in_the_modified_market(seed in any::<u64>()) {
        let inst = instance(seed);
        let (alpha_star, sigma_star) = modified_market(&inst.gamma, &inst.sigma, inst.zeta, &inst.omega, &inst.q, &inst.eta);
        let (a, b) = common::objective_terms(&inst);
        prop_assert!((&sigma_star - &a).amax() < 1e-14 * (1.0 + a.amax()));
        prop_assert!((&alpha_star - &b).amax() < 1e-14 * (1.0 + b.amax()));
        let growth_optimal = common::kkt_solve(&sigma_star, &alpha_star);
        prop_assert!((solve(&inst) - &growth_optimal).amax() < 1e-10 * (1.0 + growth_optimal.amax()));
    }
}

#[test]
fn beats_random_portfolios_on_the_running_criterion() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = common::random_model(&mut rng, 3, 2);
    let path = simulate_path(&model, 252, DEFAULT_DT, 3).unwrap();
    let run = filter_path(&model, &path).unwrap();
    let prefs = PreferenceSpec { zeta0: 1.0, zeta1: ZetaSchedule::Constant(2.0), zeta2: ZetaSchedule::Constant(0.5), ..Default::default() };
    let sigma = model.covariance();
    let sum_to_one = DVector::from_element(3, 1.0 / 3.0);
    let growth: Vec<_> = run.states.iter().map(|s| s.projected_growth.clone()).collect();
    let bench = vec![sum_to_one.clone(); growth.len()];
    let optimal: Vec<_> = growth
        .iter()
        .enumerate()
        .map(|(k, g)| optimal_portfolio(g, sigma, &prefs, k, &sum_to_one).unwrap().into_inner())
        .collect();
    let best = performance_criterion(&optimal, &bench, &bench, &growth, sigma, &prefs, DEFAULT_DT).unwrap();
    for _ in 0..1000 {
        let pi = common::random_feasible(&mut rng, 3);
        let constant = vec![pi; growth.len()];
        let value = performance_criterion(&constant, &bench, &bench, &growth, sigma, &prefs, DEFAULT_DT).unwrap();
        assert!(best >= value, "{best} < {value}");
    }
}

#[test]
fn worked_two_asset_example() {
    // A = diag(2, 1), B = (1, 0): pi = (2/3, 1/3)
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 1.0]));
    let b = DVector::from_column_slice(&[1.0, 0.0]);
    let pi = closed_form(&a, &b).unwrap();
    assert!((pi.as_vector() - DVector::from_column_slice(&[2.0 / 3.0, 1.0 / 3.0])).amax() < 1e-15);
}

#[test]
fn invalid_preferences_are_rejected() {
    let sigma = DMatrix::identity(2, 2) * 0.04;
    let gamma = DVector::from_element(2, 0.05);
    let eta = DVector::from_element(2, 0.5);
    let id = DMatrix::identity(2, 2);
    for z in [Zeta::new(0.0, 0.0, 0.0), Zeta::new(-1.0, 1.0, 1.0), Zeta::new(f64::NAN, 1.0, 1.0)] {
        assert!(optimal_portfolio_with(&gamma, &sigma, z, &id, &id, &eta, RateConvention::Alpha).is_err());
    }
    let prefs = PreferenceSpec { q: PenaltyMatrix::Identity, ..Default::default() };
    assert!(decompose(&prefs, 0, &gamma, &sigma, &eta).is_err());
    assert!(PortfolioWeights::new(DVector::from_column_slice(&[0.5, 0.4])).is_err());
}
