//! Baum-Welch EM for the Gaussian HMM with shared covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::nearest_generator;
use super::hmm::{forward_backward, log_emissions, StepParams};
use super::init::{init_strategy, regularize, sample_cov, sample_mean};
use super::viterbi::viterbi_params;
use crate::error::{Error, Result};
use crate::market::HmmModel;

/// Mass below which a state is treated as empty in the M-step.
const EMPTY_STATE: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub n_states: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub dt: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { n_states: 2, max_iters: 1000, tol: 1e-8, n_restarts: 10, seed: 0, dt: crate::market::DEFAULT_DT }
    }
}

impl EmConfig {
    pub fn with_states(&self, n_states: usize) -> Self {
        Self { n_states, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Input("n_states must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Input("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Input(format!("tol must be positive, got {}", self.tol)));
        }
        if self.n_restarts == 0 {
            return Err(Error::Input("n_restarts must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Input(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Outcome of a single restart.
#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub seed: u64,
    pub log_likelihood: Option<f64>,
    pub n_iters: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    /// Per-year model; its generator is the nearest valid generator to `transition`.
    pub model: HmmModel,
    /// Column-stochastic step matrix estimated directly by EM.
    pub transition: DMatrix<f64>,
    pub log_likelihood: f64,
    pub n_iters: usize,
    /// T x m smoothed posteriors.
    pub smoothed: DMatrix<f64>,
    pub viterbi_path: Vec<usize>,
    /// Log-likelihood after each E-step of the winning restart.
    pub trace: Vec<f64>,
    /// `||Z - exp(G dt)||_F` of the recovered generator.
    pub generator_objective: f64,
    pub dt: f64,
    pub restarts: Vec<RestartOutcome>,
}

impl EmResult {
    /// Per-step parameters with the fitted step matrix.
    pub fn step_params(&self) -> StepParams {
        StepParams {
            means: self.model.growths().iter().map(|g| g * self.dt).collect(),
            cov: self.model.covariance() * self.dt,
            transition: self.transition.clone(),
            prior: self.model.prior().clone(),
        }
    }

    /// `sum -a log a` over the smoothed posteriors.
    pub fn posterior_entropy(&self) -> f64 {
        self.smoothed.iter().filter(|a| **a > 0.0).map(|a| -a * a.ln()).sum()
    }
}

struct RunOutput {
    params: StepParams,
    smoothed: Vec<f64>,
    log_likelihood: f64,
    n_iters: usize,
    trace: Vec<f64>,
}

fn m_step(returns: &DMatrix<f64>, prev: &StepParams, fb: &super::hmm::ForwardBackward) -> StepParams {
    let (t, n) = returns.shape();
    let m = prev.n_states();
    let a = &fb.smoothed;
    let mut means = Vec::with_capacity(m);
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..m {
        let w = DVector::from_fn(t, |r, _| a[r * m + k]);
        let mass = w.sum();
        let mu = if mass > EMPTY_STATE { returns.tr_mul(&w) / mass } else { prev.means[k].clone() };
        let mut d = returns.clone();
        for (r, mut row) in d.row_iter_mut().enumerate() {
            let s = w[r].sqrt();
            for i in 0..n {
                row[i] = (row[i] - mu[i]) * s;
            }
        }
        cov += d.tr_mul(&d);
        means.push(mu);
    }
    let cov = regularize(cov / t as f64);

    let mut transition = fb.transition_counts.clone();
    for j in 0..m {
        let s = transition.column(j).sum();
        if s > EMPTY_STATE {
            transition.column_mut(j).unscale_mut(s);
        } else {
            transition.set_column(j, &prev.transition.column(j));
        }
    }
    let prior = DVector::from_fn(m, |k, _| a[k]);
    let prior = &prior / prior.sum();
    StepParams { means, cov, transition, prior }
}

fn run_em(returns: &DMatrix<f64>, mut params: StepParams, config: &EmConfig) -> Result<RunOutput> {
    let mut trace = Vec::new();
    let mut n_iters = 0;
    loop {
        let log_phi = log_emissions(returns, &params.means, &params.cov)?;
        let fb = forward_backward(&params, &log_phi)?;
        let ll = fb.log_likelihood;
        if !ll.is_finite() {
            return Err(Error::Estimation("non-finite log-likelihood".into()));
        }
        let converged = trace
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() <= config.tol * prev.abs());
        trace.push(ll);
        if converged || n_iters >= config.max_iters || config.n_states == 1 && n_iters == 1 {
            return Ok(RunOutput { params, smoothed: fb.smoothed, log_likelihood: ll, n_iters, trace });
        }
        params = m_step(returns, &params, &fb);
        n_iters += 1;
    }
}

fn restart_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Fit an `m`-state HMM by EM, keeping the best of `n_restarts` independent starts.
///
/// States are reported in ascending order of average growth rate.
pub fn em_fit(returns: &DMatrix<f64>, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    let (t, _) = returns.shape();
    let m = config.n_states;
    if t <= m {
        return Err(Error::Input(format!("need more than {m} observations, got {t}")));
    }
    if returns.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("returns contain non-finite values".into()));
    }
    let restarts = if m == 1 { 1 } else { config.n_restarts };
    let seeds = restart_seeds(config.seed, restarts);
    let runs: Vec<Result<RunOutput>> = seeds
        .par_iter()
        .map(|&s| {
            let init = if m == 1 {
                StepParams {
                    means: vec![sample_mean(returns)],
                    cov: regularize(sample_cov(returns)),
                    transition: DMatrix::identity(1, 1),
                    prior: DVector::from_element(1, 1.0),
                }
            } else {
                init_strategy(returns, m, s)?
            };
            run_em(returns, init, config)
        })
        .collect();

    let outcomes: Vec<RestartOutcome> = runs
        .iter()
        .zip(&seeds)
        .map(|(r, &seed)| match r {
            Ok(o) => RestartOutcome { seed, log_likelihood: Some(o.log_likelihood), n_iters: o.n_iters, error: None },
            Err(e) => RestartOutcome { seed, log_likelihood: None, n_iters: 0, error: Some(e.to_string()) },
        })
        .collect();
    let mut best: Option<RunOutput> = None;
    for run in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
            best = Some(run);
        }
    }
    let Some(best) = best else {
        let detail: Vec<String> = outcomes
            .iter()
            .map(|o| format!("seed {}: {}", o.seed, o.error.as_deref().unwrap_or("unknown")))
            .collect();
        return Err(Error::Estimation(format!("all {restarts} restarts failed ({})", detail.join("; "))));
    };
    for o in outcomes.iter().filter(|o| o.error.is_some()) {
        log::warn!("EM restart with seed {} failed: {}", o.seed, o.error.as_deref().unwrap_or(""));
    }
    finish(returns, best, config, outcomes)
}

fn finish(returns: &DMatrix<f64>, run: RunOutput, config: &EmConfig, restarts: Vec<RestartOutcome>) -> Result<EmResult> {
    let m = config.n_states;
    let dt = config.dt;
    let p = &run.params;
    let avg: Vec<f64> = p.means.iter().map(|mu| mu.mean()).collect();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));

    let means: Vec<DVector<f64>> = perm.iter().map(|&k| p.means[k].clone()).collect();
    let transition = DMatrix::from_fn(m, m, |a, b| p.transition[(perm[a], perm[b])]);
    let prior = DVector::from_fn(m, |k, _| p.prior[perm[k]]);
    let t = returns.nrows();
    let smoothed = DMatrix::from_fn(t, m, |r, k| run.smoothed[r * m + perm[k]]);

    let (generator, generator_objective) = match nearest_generator(&transition, dt) {
        Ok(fit) => (fit.generator, fit.objective),
        Err(Error::GeneratorFit { best, objective, iterations }) => {
            log::warn!("nearest generator stopped after {iterations} iterations (objective {objective:e}); using best iterate");
            (best, objective)
        }
        Err(e) => return Err(e),
    };
    let growth: Vec<DVector<f64>> = means.iter().map(|mu| mu / dt).collect();
    let model = HmmModel::new(growth, &p.cov / dt, generator, prior.clone())?;
    let sorted = StepParams { means, cov: p.cov.clone(), transition: transition.clone(), prior };
    let log_phi = log_emissions(returns, &sorted.means, &sorted.cov)?;
    let viterbi_path = viterbi_params(&sorted, &log_phi);
    Ok(EmResult {
        model,
        transition,
        log_likelihood: run.log_likelihood,
        n_iters: run.n_iters,
        smoothed,
        viterbi_path,
        trace: run.trace,
        generator_objective,
        dt,
        restarts,
    })
}
