mod common;

use nalgebra::{DMatrix, DVector};
use regime_portfolio::market::{simulate_path, transition_matrix, HmmModel, PricePath, DEFAULT_DT};
use regime_portfolio::Error;

fn two_state(rate: f64) -> HmmModel {
    let growth = vec![DVector::from_column_slice(&[0.1]), DVector::from_column_slice(&[-0.1])];
    let gen = DMatrix::from_row_slice(2, 2, &[-rate, rate, rate, -rate]);
    HmmModel::new(growth, DMatrix::from_element(1, 1, 0.04), gen, DVector::from_column_slice(&[0.5, 0.5])).unwrap()
}

#[test]
fn single_state_path_never_switches() {
    let model = HmmModel::single_state(DVector::zeros(2), DMatrix::identity(2, 2) * 0.04).unwrap();
    let path = simulate_path(&model, 10, DEFAULT_DT, 1).unwrap();
    assert_eq!(path.len(), 11);
    assert!(path.states.as_ref().unwrap().iter().all(|s| *s == 0));
    assert!(path.log_prices.row(0).iter().all(|x| *x == 0.0));
}

#[test]
fn zero_generator_keeps_the_initial_state() {
    let growth = vec![DVector::from_column_slice(&[0.1]), DVector::from_column_slice(&[-0.1])];
    let model = HmmModel::new(growth, DMatrix::from_element(1, 1, 0.04), DMatrix::zeros(2, 2), DVector::from_column_slice(&[1.0, 0.0])).unwrap();
    let path = simulate_path(&model, 500, DEFAULT_DT, 3).unwrap();
    assert!(path.states.unwrap().iter().all(|s| *s == 0));
}

#[test]
fn transition_frequencies_match_the_step_matrix() {
    let model = two_state(50.0);
    let steps = 100_000;
    let path = simulate_path(&model, steps, DEFAULT_DT, 11).unwrap();
    let z = model.transition_matrix(DEFAULT_DT).unwrap();
    let states = path.states.unwrap();
    for from in 0..2 {
        let visits = states[..steps].iter().filter(|s| **s == from).count() as f64;
        let moves = states.windows(2).filter(|w| w[0] == from && w[1] != from).count() as f64;
        let p = z[(1 - from, from)];
        let se = (p * (1.0 - p) / visits).sqrt();
        assert!((moves / visits - p).abs() < 3.0 * se, "state {from}: {} vs {p}", moves / visits);
    }
}

#[test]
fn single_state_increments_have_the_model_covariance() {
    let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.015, 0.015, 0.0225]);
    let model = HmmModel::single_state(DVector::from_column_slice(&[0.05, -0.02]), cov.clone()).unwrap();
    let path = simulate_path(&model, 1_000_000, DEFAULT_DT, 5).unwrap();
    let x = path.increments();
    let t = x.nrows() as f64;
    let mean = x.row_mean();
    let mut s = DMatrix::zeros(2, 2);
    for row in x.row_iter() {
        let d = (row - &mean).transpose();
        s += &d * d.transpose();
    }
    let est = s / (t * DEFAULT_DT);
    for i in 0..2 {
        for j in 0..2 {
            assert!((est[(i, j)] / cov[(i, j)] - 1.0).abs() < 0.01, "{i}{j}: {}", est[(i, j)]);
        }
    }
}

#[test]
fn occupation_matches_the_stationary_distribution() {
    let gen = DMatrix::from_row_slice(3, 3, &[-20.0, 5.0, 30.0, 12.0, -10.0, 10.0, 8.0, 5.0, -40.0]);
    let z = transition_matrix(&gen, DEFAULT_DT).unwrap();
    let pi = common::stationary(&z);
    let growth = (0..3).map(|j| DVector::from_element(1, j as f64 * 0.1)).collect();
    let model = HmmModel::new(growth, DMatrix::from_element(1, 1, 0.04), gen, pi.clone()).unwrap();
    let steps = 1_000_000;
    let states = simulate_path(&model, steps, DEFAULT_DT, 17).unwrap().states.unwrap();
    for j in 0..3 {
        let freq = states[..steps].iter().filter(|s| **s == j).count() as f64 / steps as f64;
        // asymptotic variance of the occupation indicator of a stationary chain
        let mut zk = z.clone();
        let mut acc = 0.0;
        for _ in 0..5000 {
            acc += zk[(j, j)] - pi[j];
            zk = &z * zk;
        }
        let var = pi[j] * (1.0 - pi[j]) + 2.0 * pi[j] * acc;
        let se = (var / steps as f64).sqrt();
        assert!((freq - pi[j]).abs() < 3.0 * se, "state {j}: {freq} vs {} (se {se})", pi[j]);
    }
}

#[test]
fn prices_stay_positive_and_finite() {
    let model = two_state(5.0);
    let path = simulate_path(&model, 5000, DEFAULT_DT, 2).unwrap();
    assert!(path.log_prices.iter().all(|x| x.is_finite() && x.exp() > 0.0));
    assert_eq!(path.times.len(), 5001);
    assert!((path.times[5000] - 5000.0 * DEFAULT_DT).abs() < 1e-9);
}

#[test]
fn same_seed_gives_the_same_path() {
    let model = two_state(20.0);
    let a = simulate_path(&model, 300, DEFAULT_DT, 9).unwrap();
    let b = simulate_path(&model, 300, DEFAULT_DT, 9).unwrap();
    let c = simulate_path(&model, 300, DEFAULT_DT, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.log_prices, c.log_prices);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = two_state(5.0);
    assert!(matches!(simulate_path(&model, 10, 0.0, 1), Err(Error::Input(_))));
    let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(HmmModel::single_state(DVector::zeros(2), not_pd).is_err());
    let bad_gen = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -1.0]);
    let growth = vec![DVector::zeros(1), DVector::zeros(1)];
    assert!(HmmModel::new(growth, DMatrix::identity(1, 1), bad_gen, DVector::from_column_slice(&[0.5, 0.5])).is_err());
}

#[test]
fn csv_round_trip_preserves_the_path() {
    let model = two_state(20.0);
    let path = simulate_path(&model, 50, DEFAULT_DT, 4).unwrap();
    let mut buf = Vec::new();
    path.write_csv(&mut buf).unwrap();
    let back = PricePath::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.log_prices, path.log_prices);
    assert_eq!(back.times, path.times);
}
