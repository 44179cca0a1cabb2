//! Discrete-time Gaussian HMM engine shared by EM, Viterbi and likelihood evaluation.
//!
//! Everything here is in per-step units: emissions are `N(mean_j, cov)` with
//! `mean_j = dt gamma^(j)` and `cov = dt S`. The transition matrix is column-stochastic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::HmmModel;

/// Per-step parameters of the discrete HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub means: Vec<DVector<f64>>,
    pub cov: DMatrix<f64>,
    pub transition: DMatrix<f64>,
    pub prior: DVector<f64>,
}

impl StepParams {
    pub fn n_states(&self) -> usize {
        self.means.len()
    }

    /// Discretize a continuous model with the given step matrix (defaults to `exp(G dt)`).
    pub fn from_model(model: &HmmModel, dt: f64, transition: Option<DMatrix<f64>>) -> Result<Self> {
        let transition = match transition {
            Some(z) => z,
            None => model.transition_matrix(dt)?,
        };
        Ok(Self {
            means: model.growths().iter().map(|g| g * dt).collect(),
            cov: model.covariance() * dt,
            transition,
            prior: model.prior().clone(),
        })
    }
}

/// T x m log emission densities, row-major.
pub fn log_emissions(returns: &DMatrix<f64>, means: &[DVector<f64>], cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (t, n) = returns.shape();
    let m = means.len();
    let chol = linalg::cholesky(cov, "covariance").map_err(|_| Error::Estimation("covariance lost positive definiteness".into()))?;
    let l = chol.l();
    let constant = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * linalg::log_det(&chol);
    // whiten data and means once
    let wx = l.solve_lower_triangular(&returns.transpose()).expect("nonsingular factor");
    let wm: Vec<DVector<f64>> = means
        .iter()
        .map(|mu| l.solve_lower_triangular(mu).expect("nonsingular factor"))
        .collect();
    let mut out = vec![0.0; t * m];
    for k in 0..t {
        let col = wx.column(k);
        for (j, mu) in wm.iter().enumerate() {
            let mut q = 0.0;
            for i in 0..n {
                let d = col[i] - mu[i];
                q += d * d;
            }
            out[k * m + j] = constant - 0.5 * q;
        }
    }
    Ok(out)
}

/// Output of the scaled forward-backward pass.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub n_states: usize,
    /// Smoothed posteriors `a(n, k)`, row-major T x m.
    pub smoothed: Vec<f64>,
    /// Expected transition counts, `counts[(k, j)]` for `j -> k`.
    pub transition_counts: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl ForwardBackward {
    pub fn smoothed_matrix(&self) -> DMatrix<f64> {
        let t = self.smoothed.len() / self.n_states;
        DMatrix::from_row_slice(t, self.n_states, &self.smoothed)
    }
}

/// Forward pass only: log-likelihood of the data.
pub fn forward_log_likelihood(params: &StepParams, log_phi: &[f64]) -> Result<f64> {
    Ok(forward(params, log_phi)?.2)
}

/// Scaled forward recursion. Returns (normalized alpha, scaled emissions, log-likelihood, C_n).
fn forward(params: &StepParams, log_phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let m = params.n_states();
    let t = log_phi.len() / m;
    let z = &params.transition;
    let mut phi = vec![0.0; t * m];
    let mut alpha = vec![0.0; t * m];
    let mut scale = vec![0.0; t];
    let mut loglik = 0.0;
    let mut pred = vec![0.0; m];
    for n in 0..t {
        let row = &log_phi[n * m..(n + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Estimation(format!("emission densities vanish at step {n}")));
        }
        for k in 0..m {
            phi[n * m + k] = (row[k] - max).exp();
        }
        if n == 0 {
            pred.copy_from_slice(params.prior.as_slice());
        } else {
            for (k, p) in pred.iter_mut().enumerate() {
                *p = (0..m).map(|j| z[(k, j)] * alpha[(n - 1) * m + j]).sum();
            }
        }
        let mut c = 0.0;
        for k in 0..m {
            let v = phi[n * m + k] * pred[k];
            alpha[n * m + k] = v;
            c += v;
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Estimation(format!("non-finite likelihood at step {n}")));
        }
        for k in 0..m {
            alpha[n * m + k] /= c;
        }
        scale[n] = c;
        loglik += c.ln() + max;
    }
    Ok((alpha, phi, loglik, scale))
}

/// Full E-step: smoothed posteriors and expected transition counts.
pub fn forward_backward(params: &StepParams, log_phi: &[f64]) -> Result<ForwardBackward> {
    let m = params.n_states();
    let t = log_phi.len() / m;
    let z = &params.transition;
    let (alpha, phi, log_likelihood, scale) = forward(params, log_phi)?;
    let mut beta = vec![1.0; t * m];
    let mut w = vec![0.0; m];
    for n in (0..t.saturating_sub(1)).rev() {
        for k in 0..m {
            w[k] = phi[(n + 1) * m + k] * beta[(n + 1) * m + k];
        }
        for j in 0..m {
            let s: f64 = (0..m).map(|k| z[(k, j)] * w[k]).sum();
            beta[n * m + j] = s / scale[n + 1];
        }
    }
    let mut smoothed = vec![0.0; t * m];
    for n in 0..t {
        let mut s = 0.0;
        for k in 0..m {
            let v = alpha[n * m + k] * beta[n * m + k];
            smoothed[n * m + k] = v;
            s += v;
        }
        for k in 0..m {
            smoothed[n * m + k] /= s;
        }
    }
    let mut counts = DMatrix::zeros(m, m);
    for n in 1..t {
        for k in 0..m {
            w[k] = phi[n * m + k] * beta[n * m + k] / scale[n];
        }
        for j in 0..m {
            let a = alpha[(n - 1) * m + j];
            for k in 0..m {
                counts[(k, j)] += a * w[k];
            }
        }
    }
    counts.component_mul_assign(z);
    Ok(ForwardBackward { n_states: m, smoothed, transition_counts: counts, log_likelihood })
}

/// Log-likelihood of `returns` under a continuous model, optionally with an explicit step matrix.
pub fn model_log_likelihood(
    returns: &DMatrix<f64>,
    model: &HmmModel,
    dt: f64,
    transition: Option<DMatrix<f64>>,
) -> Result<f64> {
    let params = StepParams::from_model(model, dt, transition)?;
    let log_phi = log_emissions(returns, &params.means, &params.cov)?;
    forward_log_likelihood(&params, &log_phi)
}
