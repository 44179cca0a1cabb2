//! Nearest valid generator to an estimated step transition matrix.
//!
//! Minimizes `||Z - exp(G dt)||_F` over generators (off-diagonals >= 0, columns summing to
//! zero). The free variables are the off-diagonal rates; the diagonal is implied. The fit is a
//! projected Levenberg-Marquardt iteration on the bound `rate >= 0`, with exact Jacobians from
//! the Fréchet derivative of the matrix exponential. It starts from the projected principal
//! logarithm `log(Z) / dt`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

const MAX_ITERS: usize = 500;

#[derive(Debug, Clone)]
pub struct GeneratorFit {
    pub generator: DMatrix<f64>,
    /// `||Z - exp(G dt)||_F` at the returned generator.
    pub objective: f64,
    pub iterations: usize,
}

/// Off-diagonal positions `(to, from)` in column order.
fn off_diagonal(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|from| (0..m).filter(move |to| *to != from).map(move |to| (to, from))).collect()
}

fn assemble(rates: &DVector<f64>, slots: &[(usize, usize)], m: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(m, m);
    for (r, &(to, from)) in rates.iter().zip(slots) {
        g[(to, from)] = *r;
        g[(from, from)] -= *r;
    }
    g
}

/// Clip negative off-diagonals to zero and reset the diagonal to minus the column sum.
pub fn project_to_generator(g: &DMatrix<f64>) -> DMatrix<f64> {
    let m = g.nrows();
    let slots = off_diagonal(m);
    let rates = DVector::from_iterator(slots.len(), slots.iter().map(|&(to, from)| g[(to, from)].max(0.0)));
    assemble(&rates, &slots, m)
}

/// Real principal logarithm of `Z` divided by `dt`, if one exists.
pub fn log_generator(z: &DMatrix<f64>, dt: f64) -> Option<DMatrix<f64>> {
    linalg::logm(z).map(|l| l / dt)
}

pub fn frobenius_objective(z: &DMatrix<f64>, g: &DMatrix<f64>, dt: f64) -> f64 {
    (z - linalg::expm(&(g * dt))).norm()
}

fn check_stochastic(z: &DMatrix<f64>) -> Result<()> {
    if !z.is_square() || z.is_empty() {
        return Err(Error::Input("transition matrix must be square".into()));
    }
    if z.iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(Error::Input("transition matrix entries must be nonnegative".into()));
    }
    for (i, c) in z.column_iter().enumerate() {
        if (c.sum() - 1.0).abs() > 1e-8 {
            return Err(Error::Input(format!("transition column {} sums to {}", i + 1, c.sum())));
        }
    }
    Ok(())
}

/// Closest valid generator in Frobenius distance of the implied step matrix.
///
/// Fails with [`Error::GeneratorFit`] (carrying the best iterate) if the iteration limit
/// is hit before the projected gradient vanishes.
pub fn nearest_generator(z: &DMatrix<f64>, dt: f64) -> Result<GeneratorFit> {
    check_stochastic(z)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    let m = z.nrows();
    let slots = off_diagonal(m);
    let eye = DMatrix::<f64>::identity(m, m);
    let start = log_generator(z, dt).unwrap_or_else(|| (z - &eye) / dt);
    let start = project_to_generator(&start);
    let mut rates = DVector::from_iterator(slots.len(), slots.iter().map(|&(to, from)| start[(to, from)]));
    if slots.is_empty() {
        return Ok(GeneratorFit { generator: DMatrix::zeros(1, 1), objective: 0.0, iterations: 0 });
    }

    let residual = |rates: &DVector<f64>| -> DVector<f64> {
        let g = assemble(rates, &slots, m);
        let diff = linalg::expm(&(g * dt)) - z;
        DVector::from_column_slice(diff.as_slice())
    };

    let mut r = residual(&rates);
    let mut f = r.norm_squared();
    let mut lambda = 1e-3;
    let p = slots.len();
    let mut iterations = 0;
    let mut converged = f == 0.0;
    let mut stalled = 0;

    while !converged && iterations < MAX_ITERS {
        iterations += 1;
        let g = assemble(&rates, &slots, m);
        let a = &g * dt;
        let mut jac = DMatrix::zeros(m * m, p);
        for (c, &(to, from)) in slots.iter().enumerate() {
            let mut e = DMatrix::zeros(m, m);
            e[(to, from)] = dt;
            e[(from, from)] = -dt;
            let (_, l) = linalg::expm_frechet(&a, &e);
            jac.set_column(c, &DVector::from_column_slice(l.as_slice()));
        }
        let grad = jac.transpose() * &r;
        // free set: interior rates, or rates at the bound that descent would increase
        let free: Vec<usize> = (0..p).filter(|&k| rates[k] > 0.0 || grad[k] < 0.0).collect();
        let pg = free.iter().map(|&k| grad[k].abs()).fold(0.0, f64::max);
        if free.is_empty() || pg <= 1e-14 * dt {
            converged = true;
            break;
        }
        let jf = jac.select_columns(free.iter());
        let jtj = jf.transpose() * &jf;
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&k| grad[k]));
        let mut improved = false;
        while lambda < 1e20 {
            let mut lhs = jtj.clone();
            for d in 0..free.len() {
                lhs[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&gf))) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = rates.clone();
            for (d, &k) in free.iter().enumerate() {
                trial[k] = (trial[k] + step[d]).max(0.0);
            }
            let r_trial = residual(&trial);
            let f_trial = r_trial.norm_squared();
            if f_trial < f {
                let rel = (f - f_trial) / f.max(f64::MIN_POSITIVE);
                let moved = (&trial - &rates).amax();
                rates = trial;
                r = r_trial;
                f = f_trial;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                // flat valleys: the rates may keep drifting while the objective no longer moves
                stalled = if rel < 1e-12 { stalled + 1 } else { 0 };
                if f < 1e-30 || stalled >= 10 || (rel < 1e-12 && moved <= 1e-12 * (1.0 + rates.amax())) {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // no descent direction left at machine precision
            converged = true;
        }
    }

    let generator = assemble(&rates, &slots, m);
    let objective = f.sqrt();
    if !converged {
        return Err(Error::GeneratorFit { best: generator, objective, iterations });
    }
    Ok(GeneratorFit { generator, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{check_generator, transition_matrix};

    #[test]
    fn identity_gives_zero_generator() {
        let fit = nearest_generator(&DMatrix::identity(3, 3), 1.0 / 252.0).unwrap();
        assert_eq!(fit.generator, DMatrix::zeros(3, 3));
        assert_eq!(fit.objective, 0.0);
    }

    #[test]
    fn exact_exponential_round_trips() {
        let g = DMatrix::from_row_slice(3, 3, &[-40.0, 5.0, 1.0, 30.0, -5.0, 2.0, 10.0, 0.0, -3.0]);
        let dt = 1.0 / 252.0;
        let z = transition_matrix(&g, dt).unwrap();
        let fit = nearest_generator(&z, dt).unwrap();
        check_generator(&fit.generator).unwrap();
        assert!((transition_matrix(&fit.generator, dt).unwrap() - &z).norm() < 1e-10);
    }

    #[test]
    fn invalid_log_is_improved_on() {
        // a stochastic matrix whose logarithm has a negative off-diagonal
        let z = DMatrix::from_row_slice(3, 3, &[0.9, 0.0, 0.05, 0.1, 0.95, 0.0, 0.0, 0.05, 0.95]);
        let dt = 1.0;
        let log = log_generator(&z, dt).unwrap();
        assert!(log[(0, 1)] < 0.0 || log[(1, 2)] < 0.0 || log[(2, 0)] < 0.0);
        let projected = project_to_generator(&log);
        let fit = nearest_generator(&z, dt).unwrap();
        check_generator(&fit.generator).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(fit.generator[(i, j)] >= 0.0);
                }
            }
        }
        assert!(fit.objective <= frobenius_objective(&z, &projected, dt) + 1e-15);
        assert!((fit.objective - frobenius_objective(&z, &fit.generator, dt)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_stochastic() {
        let z = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.4, 0.5]);
        assert!(matches!(nearest_generator(&z, 1.0), Err(Error::Input(_))));
    }
}
