//! Regime-switching market model and its discrete-time simulator.
//!
//! Log prices follow `d log X = gamma^(Theta) dt + xi dW` where `Theta` is a Markov chain
//! with generator `G`. Generators use the column convention: `G[(j, i)]` is the jump rate
//! from state `i` into state `j`, every column sums to zero, and `exp(G dt)` is
//! column-stochastic.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_num;
use crate::linalg::{self, Chol};

/// Default step: one trading day.
pub const DEFAULT_DT: f64 = 1.0 / 252.0;

const GENERATOR_TOL: f64 = 1e-9;
const PRIOR_TOL: f64 = 1e-12;

/// Parameters of the hidden-Markov market. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct HmmModel {
    growth: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    generator: DMatrix<f64>,
    prior: DVector<f64>,
    cov_chol: Chol,
}

impl PartialEq for HmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.growth == other.growth
            && self.covariance == other.covariance
            && self.generator == other.generator
            && self.prior == other.prior
    }
}

/// On-disk form of [`HmmModel`]: row-major nested arrays, per-year units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub n_assets: usize,
    pub n_states: usize,
    pub growth: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
    pub generator: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Model(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<ModelDoc> for HmmModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let (n, m) = (doc.n_assets, doc.n_states);
        if doc.growth.len() != m || doc.growth.iter().any(|g| g.len() != n) {
            return Err(Error::Model(format!("growth must be {m}x{n}")));
        }
        if doc.prior.len() != m {
            return Err(Error::Model(format!("prior must have length {m}")));
        }
        HmmModel::new(
            doc.growth.iter().map(|g| DVector::from_column_slice(g)).collect(),
            matrix_from_rows(&doc.covariance, n, n, "covariance")?,
            matrix_from_rows(&doc.generator, m, m, "generator")?,
            DVector::from_vec(doc.prior),
        )
    }
}

impl From<HmmModel> for ModelDoc {
    fn from(model: HmmModel) -> Self {
        ModelDoc {
            n_assets: model.n_assets(),
            n_states: model.n_states(),
            growth: model.growth.iter().map(|g| g.iter().copied().collect()).collect(),
            covariance: matrix_to_rows(&model.covariance),
            generator: matrix_to_rows(&model.generator),
            prior: model.prior.iter().copied().collect(),
        }
    }
}

pub(crate) fn check_generator(generator: &DMatrix<f64>) -> Result<()> {
    let m = generator.nrows();
    if !generator.is_square() {
        return Err(Error::Model("generator must be square".into()));
    }
    let scale = generator.amax().max(1.0);
    for i in 0..m {
        for j in 0..m {
            let g = generator[(j, i)];
            if !g.is_finite() {
                return Err(Error::Model("generator has non-finite entries".into()));
            }
            if i != j && g < 0.0 {
                return Err(Error::Model(format!("generator off-diagonal ({}, {}) is negative", j + 1, i + 1)));
            }
        }
        let col_sum: f64 = generator.column(i).sum();
        if col_sum.abs() > GENERATOR_TOL * scale {
            return Err(Error::Model(format!("generator column {} sums to {col_sum:e}, not 0", i + 1)));
        }
    }
    Ok(())
}

pub(crate) fn check_prior(prior: &DVector<f64>) -> Result<()> {
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Model("prior entries must be nonnegative".into()));
    }
    if (prior.sum() - 1.0).abs() > PRIOR_TOL {
        return Err(Error::Model(format!("prior sums to {}, not 1", prior.sum())));
    }
    Ok(())
}

impl HmmModel {
    pub fn new(
        growth: Vec<DVector<f64>>,
        covariance: DMatrix<f64>,
        generator: DMatrix<f64>,
        prior: DVector<f64>,
    ) -> Result<Self> {
        let m = growth.len();
        if m == 0 {
            return Err(Error::Model("at least one state is required".into()));
        }
        let n = growth[0].len();
        if n == 0 || growth.iter().any(|g| g.len() != n) {
            return Err(Error::Model("growth vectors must share a positive length".into()));
        }
        if growth.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Model("growth has non-finite entries".into()));
        }
        if covariance.shape() != (n, n) {
            return Err(Error::Model(format!("covariance must be {n}x{n}")));
        }
        if generator.shape() != (m, m) {
            return Err(Error::Model(format!("generator must be {m}x{m}")));
        }
        if prior.len() != m {
            return Err(Error::Model(format!("prior must have length {m}")));
        }
        if !linalg::is_symmetric(&covariance, 1e-10) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("covariance must be finite and symmetric".into()));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(Error::Model(format!(
                "covariance is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let cov_chol = linalg::cholesky(&covariance, "covariance")?;
        check_generator(&generator)?;
        check_prior(&prior)?;
        Ok(Self { growth, covariance, generator, prior, cov_chol })
    }

    /// Single-state model (geometric Brownian motion in log prices).
    pub fn single_state(growth: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![growth], covariance, DMatrix::zeros(1, 1), DVector::from_element(1, 1.0))
    }

    pub fn n_assets(&self) -> usize {
        self.growth[0].len()
    }

    pub fn n_states(&self) -> usize {
        self.growth.len()
    }

    /// Per-year growth vector of state `j` (0-based).
    pub fn growth(&self, j: usize) -> &DVector<f64> {
        &self.growth[j]
    }

    pub fn growths(&self) -> &[DVector<f64>] {
        &self.growth
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn cov_cholesky(&self) -> &Chol {
        &self.cov_chol
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }

    /// Column-stochastic step transition matrix `exp(G dt)`.
    pub fn transition_matrix(&self, dt: f64) -> Result<DMatrix<f64>> {
        transition_matrix(&self.generator, dt)
    }

    /// Same model with a different initial distribution.
    pub fn with_prior(&self, prior: DVector<f64>) -> Result<Self> {
        check_prior(&prior)?;
        Ok(Self { prior, ..self.clone() })
    }

    /// Relabel states: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.n_states();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input("not a permutation of the states".into()));
        }
        let growth = perm.iter().map(|&p| self.growth[p].clone()).collect();
        let generator = DMatrix::from_fn(m, m, |a, b| self.generator[(perm[a], perm[b])]);
        let prior = DVector::from_fn(m, |k, _| self.prior[perm[k]]);
        Ok(Self { growth, generator, prior, ..self.clone() })
    }

    /// Cross-sectional average growth of each state.
    pub fn average_growth(&self) -> Vec<f64> {
        self.growth.iter().map(|g| g.mean()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        crate::io::to_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `exp(G dt)` for a valid generator `G`.
pub fn transition_matrix(generator: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    check_generator(generator)?;
    let mut z = linalg::expm(&(generator * dt));
    // clip roundoff negatives and restore exact column sums
    for mut col in z.column_iter_mut() {
        col.iter_mut().for_each(|v| *v = v.max(0.0));
        let s = col.sum();
        col /= s;
    }
    Ok(z)
}

/// A discretely observed log-price path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath {
    pub times: Vec<f64>,
    /// T x n matrix of log prices.
    pub log_prices: DMatrix<f64>,
    /// Realized states (0-based), one per grid time; only for simulated paths.
    pub states: Option<Vec<usize>>,
}

impl PricePath {
    pub fn new(times: Vec<f64>, log_prices: DMatrix<f64>, states: Option<Vec<usize>>) -> Result<Self> {
        let path = Self { times, log_prices, states };
        path.validate()?;
        Ok(path)
    }

    /// Build a path from log returns, starting at zero log price.
    pub fn from_log_returns(returns: &DMatrix<f64>, dt: f64) -> Result<Self> {
        let (t, n) = returns.shape();
        let mut log_prices = DMatrix::zeros(t + 1, n);
        for k in 0..t {
            let next = log_prices.row(k) + returns.row(k);
            log_prices.set_row(k + 1, &next);
        }
        Self::new((0..=t).map(|k| k as f64 * dt).collect(), log_prices, None)
    }

    fn validate(&self) -> Result<()> {
        let t = self.times.len();
        if self.log_prices.nrows() != t {
            return Err(Error::Input("times and log_prices lengths differ".into()));
        }
        if let Some(states) = &self.states {
            if states.len() != t {
                return Err(Error::Input("states and times lengths differ".into()));
            }
        }
        if self.log_prices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("log prices must be finite".into()));
        }
        if t >= 2 {
            let dt = self.times[1] - self.times[0];
            if !(dt > 0.0) {
                return Err(Error::Input("times must be strictly increasing".into()));
            }
            for w in self.times.windows(2) {
                if ((w[1] - w[0]) - dt).abs() > 1e-12 {
                    return Err(Error::Input("times must be uniformly spaced".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.log_prices.ncols()
    }

    pub fn dt(&self) -> Option<f64> {
        (self.times.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    /// (T-1) x n log-price increments.
    pub fn increments(&self) -> DMatrix<f64> {
        let t = self.len();
        let n = self.n_assets();
        if t < 2 {
            return DMatrix::zeros(0, n);
        }
        self.log_prices.rows(1, t - 1) - self.log_prices.rows(0, t - 1)
    }

    /// CSV with header `t, asset_1..asset_n[, state]`; states written 1-based.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.n_assets();
        let mut header = vec!["t".to_owned()];
        header.extend((1..=n).map(|i| format!("asset_{i}")));
        if self.states.is_some() {
            header.push("state".to_owned());
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(self.log_prices.row(k).iter().map(|v| fmt_num(*v)));
            if let Some(states) = &self.states {
                row.push((states[k] + 1).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("t") {
            return Err(Error::Input("price path csv must start with a `t` column".into()));
        }
        let has_state = headers.iter().next_back() == Some("state");
        let n = headers.len() - 1 - usize::from(has_state);
        if n == 0 {
            return Err(Error::Input("price path csv has no asset columns".into()));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut states = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::Input(format!("row {line}: expected {} fields", headers.len())));
            }
            let parse = |s: &str, col: usize| -> Result<f64> {
                s.parse().map_err(|_| Error::Input(format!("row {line}, column {col}: cannot parse {s:?}")))
            };
            times.push(parse(&record[0], 1)?);
            for j in 0..n {
                values.push(parse(&record[j + 1], j + 2)?);
            }
            if has_state {
                let s: usize = record[n + 1]
                    .parse()
                    .ok()
                    .filter(|s| *s >= 1)
                    .ok_or_else(|| Error::Input(format!("row {line}: bad state label")))?;
                states.push(s - 1);
            }
        }
        let t = times.len();
        Self::new(times, DMatrix::from_row_slice(t, n, &values), has_state.then_some(states))
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Simulate `horizon_steps` increments with switching only at grid points.
///
/// The increment over `[t_k, t_{k+1}]` is `N(dt gamma^(Theta_k), dt Sigma)`; the next state is
/// drawn from column `Theta_k` of `exp(G dt)`.
pub fn simulate_path(model: &HmmModel, horizon_steps: usize, dt: f64, seed: u64) -> Result<PricePath> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    if horizon_steps == 0 {
        return Err(Error::Input("horizon_steps must be positive".into()));
    }
    let n = model.n_assets();
    let z = model.transition_matrix(dt)?;
    let l = model.cov_cholesky().l();
    let sqrt_dt = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let rows = horizon_steps + 1;
    let mut log_prices = DMatrix::zeros(rows, n);
    let mut states = Vec::with_capacity(rows);
    let mut state = sample_categorical(&mut rng, model.prior().iter().copied());
    states.push(state);
    let mut noise = DVector::zeros(n);
    for k in 0..horizon_steps {
        noise.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let inc = model.growth(state) * dt + &l * &noise * sqrt_dt;
        let next = log_prices.row(k) + inc.transpose();
        log_prices.set_row(k + 1, &next);
        state = sample_categorical(&mut rng, z.column(state).iter().copied());
        states.push(state);
    }
    PricePath::new((0..rows).map(|k| k as f64 * dt).collect(), log_prices, Some(states))
}
