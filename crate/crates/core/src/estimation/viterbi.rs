//! Most probable state path, computed in log space.

use nalgebra::DMatrix;

use super::em::EmResult;
use super::hmm::{log_emissions, StepParams};
use crate::error::Result;
use crate::market::HmmModel;

/// Viterbi path for per-step parameters and precomputed log emissions (row-major T x m).
///
/// Ties are broken toward the lowest state index.
pub fn viterbi_params(params: &StepParams, log_phi: &[f64]) -> Vec<usize> {
    let m = params.n_states();
    let t = log_phi.len() / m;
    if t == 0 {
        return Vec::new();
    }
    let log_z = params.transition.map(f64::ln);
    let mut delta: Vec<f64> = (0..m).map(|k| params.prior[k].ln() + log_phi[k]).collect();
    let mut back = vec![0usize; t * m];
    let mut next = vec![0.0; m];
    for n in 1..t {
        for k in 0..m {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..m {
                let v = delta[j] + log_z[(k, j)];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            back[n * m + k] = arg;
            next[k] = best + log_phi[n * m + k];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut state = 0;
    for k in 1..m {
        if delta[k] > delta[state] {
            state = k;
        }
    }
    let mut path = vec![0; t];
    path[t - 1] = state;
    for n in (1..t).rev() {
        state = back[n * m + state];
        path[n - 1] = state;
    }
    path
}

/// Viterbi path of `returns` under a continuous model discretized at `dt`.
pub fn viterbi(returns: &DMatrix<f64>, model: &HmmModel, dt: f64) -> Result<Vec<usize>> {
    let params = StepParams::from_model(model, dt, None)?;
    let log_phi = log_emissions(returns, &params.means, &params.cov)?;
    Ok(viterbi_params(&params, &log_phi))
}

/// Viterbi path under a fitted result, using its estimated step matrix.
pub fn viterbi_fitted(returns: &DMatrix<f64>, fit: &EmResult) -> Result<Vec<usize>> {
    let params = fit.step_params();
    let log_phi = log_emissions(returns, &params.means, &params.cov)?;
    Ok(viterbi_params(&params, &log_phi))
}
