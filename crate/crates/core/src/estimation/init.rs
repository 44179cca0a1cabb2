//! Starting values for EM from an independent Gaussian mixture with shared covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::hmm::{log_emissions, StepParams};
use crate::error::{Error, Result};
use crate::linalg;

const MIXTURE_ITERS: usize = 200;
const MAX_RETRIES: usize = 5;
const STAY_PROB: f64 = 0.95;

pub(crate) fn sample_mean(returns: &DMatrix<f64>) -> DVector<f64> {
    returns.row_mean().transpose()
}

/// Biased (1/T) sample covariance.
pub(crate) fn sample_cov(returns: &DMatrix<f64>) -> DMatrix<f64> {
    let t = returns.nrows() as f64;
    let mean = returns.row_mean();
    let mut centered = returns.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    centered.transpose() * &centered / t
}

/// Add `ridge I` until the Cholesky factorization succeeds.
pub(crate) fn regularize(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    cov = (&cov + cov.transpose()) * 0.5;
    if nalgebra::Cholesky::new(cov.clone()).is_some() && cov.diagonal().iter().all(|d| *d > 0.0) {
        return cov;
    }
    let n = cov.nrows();
    let mut ridge = 1e-10 * (cov.trace() / n as f64).max(1e-12);
    loop {
        let candidate = &cov + DMatrix::identity(n, n) * ridge;
        if nalgebra::Cholesky::new(candidate.clone()).is_some() {
            log::warn!("covariance regularized with ridge {ridge:e}");
            return candidate;
        }
        ridge *= 10.0;
    }
}

fn default_transition(m: usize) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::identity(1, 1);
    }
    let off = (1.0 - STAY_PROB) / (m - 1) as f64;
    DMatrix::from_fn(m, m, |i, j| if i == j { STAY_PROB } else { off })
}

/// k-means++ style seeding of `m` centers from the rows of `returns`.
fn seed_centers(returns: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let t = returns.nrows();
    let row = |k: usize| returns.row(k).transpose();
    let mut centers = vec![row(rng.random_range(0..t))];
    let mut dist: Vec<f64> = (0..t).map(|k| (row(k) - &centers[0]).norm_squared()).collect();
    while centers.len() < m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter().position(|d| {
                acc += d;
                acc > u
            })
            .unwrap_or(t - 1)
        } else {
            rng.random_range(0..t)
        };
        let c = row(pick);
        for (k, d) in dist.iter_mut().enumerate() {
            *d = d.min((row(k) - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Fitted independent mixture: component means and weights.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub means: Vec<DVector<f64>>,
    pub weights: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn fit_mixture(returns: &DMatrix<f64>, m: usize, mut means: Vec<DVector<f64>>) -> Result<Mixture> {
    let (t, n) = returns.shape();
    let mut cov = regularize(sample_cov(returns));
    let mut weights = DVector::from_element(m, 1.0 / m as f64);
    let mut prev = f64::NEG_INFINITY;
    let mut resp = vec![0.0; t * m];
    for _ in 0..MIXTURE_ITERS {
        let log_phi = log_emissions(returns, &means, &cov)?;
        let mut ll = 0.0;
        for k in 0..t {
            let row: Vec<f64> = (0..m).map(|j| log_phi[k * m + j] + weights[j].ln()).collect();
            let lse = linalg::log_sum_exp(&row);
            ll += lse;
            for j in 0..m {
                resp[k * m + j] = (row[j] - lse).exp();
            }
        }
        let mass: Vec<f64> = (0..m).map(|j| (0..t).map(|k| resp[k * m + j]).sum()).collect();
        if mass.iter().any(|w| !(*w > 1e-8 * t as f64)) || !ll.is_finite() {
            return Err(Error::Estimation("mixture component collapsed".into()));
        }
        for j in 0..m {
            let mut mu = DVector::zeros(n);
            for k in 0..t {
                mu.axpy(resp[k * m + j], &returns.row(k).transpose(), 1.0);
            }
            means[j] = mu / mass[j];
            weights[j] = mass[j] / t as f64;
        }
        let mut c = DMatrix::zeros(n, n);
        for k in 0..t {
            let x = returns.row(k).transpose();
            for j in 0..m {
                let d = &x - &means[j];
                c.ger(resp[k * m + j], &d, &d, 1.0);
            }
        }
        cov = regularize(c / t as f64);
        if (ll - prev).abs() <= 1e-10 * ll.abs() {
            break;
        }
        prev = ll;
    }
    let s = weights.sum();
    Ok(Mixture { means, weights: weights / s, cov })
}

/// Initial per-step parameters for one EM restart.
///
/// Mixture means and weights seed the state means and initial distribution; the
/// empirical covariance seeds the shared covariance; the transition matrix puts 0.95 on
/// the diagonal and spreads the rest uniformly.
pub fn init_strategy(returns: &DMatrix<f64>, m: usize, seed: u64) -> Result<StepParams> {
    let (t, n) = returns.shape();
    if m == 0 {
        return Err(Error::Input("number of states must be positive".into()));
    }
    if t <= m {
        return Err(Error::Input(format!("need more than {m} observations, got {t}")));
    }
    let cov = regularize(sample_cov(returns));
    if m == 1 {
        return Ok(StepParams {
            means: vec![sample_mean(returns)],
            cov,
            transition: default_transition(1),
            prior: DVector::from_element(1, 1.0),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = cov.diagonal().map(f64::sqrt);
    for attempt in 0..=MAX_RETRIES {
        let mut centers = seed_centers(returns, m, &mut rng);
        if attempt > 0 {
            for c in &mut centers {
                for i in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    c[i] += 0.5 * scale[i] * z;
                }
            }
        }
        match fit_mixture(returns, m, centers) {
            Ok(mix) => {
                let prior = mix.weights.map(|w| w.max(1e-12));
                let s = prior.sum();
                return Ok(StepParams { means: mix.means, cov, transition: default_transition(m), prior: prior / s });
            }
            Err(e) => log::debug!("mixture init attempt {attempt} failed: {e}"),
        }
    }
    Err(Error::Estimation(format!("mixture initialization degenerate after {MAX_RETRIES} jittered retries")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_uses_sample_moments() {
        let r = DMatrix::from_row_slice(4, 2, &[0.1, 0.0, 0.3, 0.2, -0.1, 0.4, 0.1, 0.2]);
        let p = init_strategy(&r, 1, 0).unwrap();
        assert!((p.means[0][0] - 0.1).abs() < 1e-15);
        assert!((p.cov - sample_cov(&r)).amax() < 1e-15);
    }

    #[test]
    fn separated_clusters_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 2000;
        let mut data = Vec::with_capacity(t);
        for k in 0..t {
            let centre = if k % 3 == 0 { 30.0 } else { 20.0 };
            data.push(centre + rng.sample::<f64, _>(StandardNormal));
        }
        let r = DMatrix::from_column_slice(t, 1, &data);
        let p = init_strategy(&r, 2, 1).unwrap();
        let mut means: Vec<f64> = p.means.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        let hi: Vec<f64> = data.iter().copied().filter(|x| *x > 25.0).collect();
        let lo: Vec<f64> = data.iter().copied().filter(|x| *x <= 25.0).collect();
        let hi_mean = hi.iter().sum::<f64>() / hi.len() as f64;
        let lo_mean = lo.iter().sum::<f64>() / lo.len() as f64;
        assert!(((means[1] - hi_mean) / hi_mean).abs() < 0.01);
        assert!(((means[0] - lo_mean) / lo_mean).abs() < 0.01);
        assert!((p.prior.sum() - 1.0).abs() < 1e-12);
        assert!((p.transition[(0, 0)] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn constant_series_is_regularized() {
        let r = DMatrix::from_element(50, 2, 0.001);
        let p = init_strategy(&r, 1, 0).unwrap();
        assert!(nalgebra::Cholesky::new(p.cov).is_some());
    }

    #[test]
    fn too_few_observations() {
        let r = DMatrix::from_element(2, 1, 0.0);
        assert!(matches!(init_strategy(&r, 2, 0), Err(Error::Input(_))));
    }
}
