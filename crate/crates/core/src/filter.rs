//! Online regime filter.
//!
//! One step maps the un-normalized state `P_t` to
//! `P_{t+dt} = exp(G dt) (P^1_t Y_1, ..., P^m_t Y_m)` with
//! `Y_j = exp(-1/2 g_j' S^-1 g_j dt + g_j' S^-1 dlogX)`, computed in log space. `P` is
//! renormalized after every step and the removed log factor is accumulated. The
//! accumulated factor also carries the state-independent Gaussian constant, so
//! `log_scale` is the exact log-likelihood of the observed increments.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::fmt_num;
use crate::linalg;
use crate::market::{HmmModel, PricePath};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Renormalized `P_t` (sums to one after every step).
    pub unnormalized: DVector<f64>,
    pub posterior: DVector<f64>,
    /// `sum_j p^j gamma^(j)`, per year.
    pub projected_growth: DVector<f64>,
    /// Accumulated log normalization, equal to the log-likelihood so far.
    pub log_scale: f64,
    /// Log-likelihood contribution of the most recent observation.
    pub loglik_increment: f64,
}

fn project_growth(model: &HmmModel, posterior: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(model.n_assets());
    for (j, p) in posterior.iter().enumerate() {
        g.axpy(*p, model.growth(j), 1.0);
    }
    g
}

/// Filter start: `P_0 = p_0`.
pub fn init_filter(model: &HmmModel) -> FilterState {
    let prior = model.prior().clone();
    FilterState {
        projected_growth: project_growth(model, &prior),
        unnormalized: prior.clone(),
        posterior: prior,
        log_scale: 0.0,
        loglik_increment: 0.0,
    }
}

/// Precomputed quantities for one `(model, dt)` pair.
#[derive(Debug, Clone)]
pub struct Filter<'a> {
    model: &'a HmmModel,
    dt: f64,
    transition: DMatrix<f64>,
    /// `S^-1 gamma^(j)` per state.
    weighted_growth: Vec<DVector<f64>>,
    /// `-1/2 gamma^(j)' S^-1 gamma^(j) dt` per state.
    drift_term: Vec<f64>,
    /// `-n/2 log(2 pi dt) - 1/2 log det S`.
    log_norm: f64,
}

impl<'a> Filter<'a> {
    pub fn new(model: &'a HmmModel, dt: f64) -> Result<Self> {
        let transition = model.transition_matrix(dt)?;
        Self::with_transition(model, transition, dt)
    }

    /// Use an explicit column-stochastic step matrix instead of `exp(G dt)`.
    pub fn with_transition(model: &'a HmmModel, transition: DMatrix<f64>, dt: f64) -> Result<Self> {
        let m = model.n_states();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Input(format!("dt must be positive, got {dt}")));
        }
        if transition.shape() != (m, m) {
            return Err(Error::Input(format!("transition must be {m}x{m}")));
        }
        let chol = model.cov_cholesky();
        let weighted_growth: Vec<_> = model.growths().iter().map(|g| chol.solve(g)).collect();
        let drift_term = model
            .growths()
            .iter()
            .zip(&weighted_growth)
            .map(|(g, w)| -0.5 * g.dot(w) * dt)
            .collect();
        let n = model.n_assets() as f64;
        let log_norm = -0.5 * n * (2.0 * std::f64::consts::PI * dt).ln() - 0.5 * linalg::log_det(chol);
        Ok(Self { model, dt, transition, weighted_growth, drift_term, log_norm })
    }

    pub fn model(&self) -> &HmmModel {
        self.model
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// `log Y_j` for every state.
    pub fn log_likelihood_ratios(&self, log_return: &DVector<f64>) -> Vec<f64> {
        self.weighted_growth
            .iter()
            .zip(&self.drift_term)
            .map(|(w, d)| d + w.dot(log_return))
            .collect()
    }

    pub fn step(&self, state: &FilterState, log_return: &DVector<f64>) -> Result<FilterState> {
        self.step_at(state, log_return, 0)
    }

    fn step_at(&self, state: &FilterState, log_return: &DVector<f64>, step: usize) -> Result<FilterState> {
        if log_return.len() != self.model.n_assets() {
            return Err(Error::Input(format!(
                "log return has length {}, expected {}",
                log_return.len(),
                self.model.n_assets()
            )));
        }
        if log_return.iter().any(|v| !v.is_finite()) {
            return Err(Error::FilterDegenerate { step, reason: "non-finite log return".into() });
        }
        let log_y = self.log_likelihood_ratios(log_return);
        let max = state
            .unnormalized
            .iter()
            .zip(&log_y)
            .filter(|(p, _)| **p > 0.0)
            .map(|(_, ly)| *ly)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::FilterDegenerate { step, reason: "no state carries positive mass".into() });
        }
        let weights = DVector::from_iterator(
            log_y.len(),
            state.unnormalized.iter().zip(&log_y).map(|(p, ly)| p * (ly - max).exp()),
        );
        let total = weights.sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::FilterDegenerate { step, reason: "all state weights underflowed".into() });
        }
        let mut next = &self.transition * (weights / total);
        let mass = next.sum();
        next /= mass;

        let sigma_chol = self.model.cov_cholesky();
        let common = self.log_norm - 0.5 * linalg::quad_form_inv(sigma_chol, log_return) / self.dt;
        let increment = max + total.ln() + mass.ln() + common;
        Ok(FilterState {
            projected_growth: project_growth(self.model, &next),
            unnormalized: next.clone(),
            posterior: next,
            log_scale: state.log_scale + increment,
            loglik_increment: increment,
        })
    }

    /// Fold [`Filter::step`] over the rows of a T x n increment matrix.
    pub fn run(&self, init: FilterState, returns: &DMatrix<f64>) -> Result<FilterRun> {
        let mut states = Vec::with_capacity(returns.nrows());
        let mut current = init;
        for k in 0..returns.nrows() {
            let x = returns.row(k).transpose();
            current = self.step_at(&current, &x, k)?;
            states.push(current.clone());
        }
        let log_likelihood = states.last().map_or(0.0, |s| s.log_scale);
        Ok(FilterRun { states, log_likelihood })
    }
}

/// One-step update, rebuilding the step matrix; prefer [`Filter`] in loops.
pub fn filter_step(state: &FilterState, model: &HmmModel, log_return: &DVector<f64>, dt: f64) -> Result<FilterState> {
    Filter::new(model, dt)?.step(state, log_return)
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    /// One state per increment; `states[k]` has seen increments `0..=k`.
    pub states: Vec<FilterState>,
    pub log_likelihood: f64,
}

impl FilterRun {
    /// CSV with header `t, p_1..p_m, gamma_hat_1..gamma_hat_n, loglik_increment`.
    pub fn write_csv<W: Write>(&self, writer: W, times: &[f64]) -> Result<()> {
        self.write_csv_labeled(writer, times, None)
    }

    /// As [`FilterRun::write_csv`], with an optional leading `date` column copied verbatim.
    pub fn write_csv_labeled<W: Write>(&self, writer: W, times: &[f64], dates: Option<&[String]>) -> Result<()> {
        if times.len() != self.states.len() || dates.is_some_and(|d| d.len() != self.states.len()) {
            return Err(Error::Input("one time (and date) per filter state is required".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let (m, n) = match self.states.first() {
            Some(s) => (s.posterior.len(), s.projected_growth.len()),
            None => (0, 0),
        };
        let mut header = Vec::new();
        if dates.is_some() {
            header.push("date".to_owned());
        }
        header.push("t".to_owned());
        header.extend((1..=m).map(|j| format!("p_{j}")));
        header.extend((1..=n).map(|i| format!("gamma_hat_{i}")));
        header.push("loglik_increment".to_owned());
        w.write_record(&header)?;
        for (k, (t, s)) in times.iter().zip(&self.states).enumerate() {
            let mut row = Vec::new();
            if let Some(d) = dates {
                row.push(d[k].clone());
            }
            row.push(fmt_num(*t));
            row.extend(s.posterior.iter().map(|v| fmt_num(*v)));
            row.extend(s.projected_growth.iter().map(|v| fmt_num(*v)));
            row.push(fmt_num(s.loglik_increment));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Filter a whole price path starting from the model prior.
pub fn filter_path(model: &HmmModel, path: &PricePath) -> Result<FilterRun> {
    if path.len() < 2 {
        return Err(Error::Input("price path needs at least two observations".into()));
    }
    let dt = path.dt().expect("two observations give a step");
    Filter::new(model, dt)?.run(init_filter(model), &path.increments())
}
