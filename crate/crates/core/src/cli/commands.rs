//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{AllocateConfig, BacktestConfig, FilterConfig, FitConfig, SimulateConfig};
use crate::allocator::{decompose, gop, mqp, optimal_portfolio};
use crate::backtest::run_backtests;
use crate::error::{Error, Result};
use crate::estimation::{select_states, Criterion, CriteriaRow, EmConfig, EmResult};
use crate::filter::{init_filter, Filter};
use crate::io::{fmt_num, to_json};
use crate::market::{matrix_to_rows, simulate_path, HmmModel, DEFAULT_DT};

/// Settings shared by every subcommand after flag overrides.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub out: PathBuf,
    /// Directory that relative paths in the config resolve against.
    pub base: PathBuf,
}

/// Git-style object hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Outputs {
    files: Vec<(&'static str, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    fn csv(&mut self, name: &'static str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    /// Write every file plus `metadata.json` listing their hashes.
    fn commit<M: Serialize>(self, dir: &Path, command: &str, details: M) -> Result<()> {
        #[derive(Serialize)]
        struct Metadata<'a, M> {
            command: &'a str,
            version: &'a str,
            details: M,
            files: BTreeMap<&'a str, String>,
        }
        std::fs::create_dir_all(dir)?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
            hashes.insert(*name, content_hash(bytes));
        }
        let meta = Metadata { command, version: env!("CARGO_PKG_VERSION"), details, files: hashes };
        std::fs::write(dir.join("metadata.json"), to_json(&meta)?)?;
        Ok(())
    }
}

pub fn simulate(ctx: &Context, cfg: &SimulateConfig) -> Result<()> {
    let model = cfg.model_ref().load(&ctx.base)?;
    if cfg.horizon_steps == 0 {
        return Err(Error::Input("horizon_steps must be positive".into()));
    }
    let dt = ctx.dt.unwrap_or(DEFAULT_DT);
    let seed = ctx.seed.unwrap_or(0);
    let path = simulate_path(&model, cfg.horizon_steps, dt, seed)?;
    let mut out = Outputs::new();
    out.csv("path.csv", |b| path.write_csv(b))?;
    out.add("model.json", model.to_json()?.into_bytes());

    #[derive(Serialize)]
    struct Details {
        seed: u64,
        dt: f64,
        horizon_steps: usize,
        n_assets: usize,
        n_states: usize,
    }
    let details = Details { seed, dt, horizon_steps: cfg.horizon_steps, n_assets: model.n_assets(), n_states: model.n_states() };
    out.commit(&ctx.out, "simulate", details)
}

/// Per-state summary of a fitted model along its Viterbi path.
#[derive(Debug, Serialize)]
struct StateSummary {
    state: usize,
    average_daily_growth_bps: f64,
    days_in_state: usize,
    fraction_of_days: f64,
    expected_sojourn_days: f64,
}

fn state_summary(fit: &EmResult) -> Vec<StateSummary> {
    let t = fit.viterbi_path.len().max(1);
    let g = fit.model.generator();
    (0..fit.model.n_states())
        .map(|j| {
            let days = fit.viterbi_path.iter().filter(|s| **s == j).count();
            let rate = -g[(j, j)];
            StateSummary {
                state: j + 1,
                average_daily_growth_bps: fit.model.growth(j).mean() * fit.dt * 1e4,
                days_in_state: days,
                fraction_of_days: days as f64 / t as f64,
                expected_sojourn_days: if rate > 0.0 { 1.0 / (rate * fit.dt) } else { f64::INFINITY },
            }
        })
        .collect()
}

#[derive(Serialize)]
struct RestartDoc {
    seed: u64,
    log_likelihood: Option<f64>,
    n_iters: usize,
    error: Option<String>,
}

#[derive(Serialize)]
struct FitDoc<'a> {
    #[serde(flatten)]
    model: &'a HmmModel,
    transition: Vec<Vec<f64>>,
    log_likelihood: f64,
    n_iters: usize,
    generator_objective: f64,
    dt: f64,
    selected_by: Criterion,
    chosen: &'a BTreeMap<Criterion, usize>,
    criteria: &'a [CriteriaRow],
    excluded: Vec<ExcludedDoc>,
    restarts: Vec<RestartDoc>,
    states: Vec<StateSummary>,
}

#[derive(Serialize)]
struct ExcludedDoc {
    m: usize,
    reason: String,
}

pub fn fit(ctx: &Context, cfg: &FitConfig) -> Result<()> {
    if cfg.candidate_states.is_empty() || cfg.candidate_states.contains(&0) {
        return Err(Error::Input("candidate_states must be non-empty positive counts".into()));
    }
    let data = cfg.data.load(&ctx.base, ctx.dt)?;
    let returns = data.path.increments();
    let em = EmConfig {
        n_states: 1,
        max_iters: cfg.em.max_iters,
        tol: cfg.em.tol,
        n_restarts: cfg.em.n_restarts,
        seed: ctx.seed.unwrap_or(cfg.em.seed),
        dt: data.dt,
    };
    em.validate()?;
    let mut criteria = cfg.criteria.clone();
    if !criteria.contains(&cfg.select_by) {
        criteria.push(cfg.select_by);
    }
    let sel = select_states(&returns, &cfg.candidate_states, &criteria, &em)?;
    let fit = sel.chosen_fit(cfg.select_by).expect("selected candidate was fitted");
    let doc = FitDoc {
        model: &fit.model,
        transition: matrix_to_rows(&fit.transition),
        log_likelihood: fit.log_likelihood,
        n_iters: fit.n_iters,
        generator_objective: fit.generator_objective,
        dt: data.dt,
        selected_by: cfg.select_by,
        chosen: &sel.chosen,
        criteria: &sel.rows,
        excluded: sel.excluded.iter().map(|(m, r)| ExcludedDoc { m: *m, reason: r.clone() }).collect(),
        restarts: fit
            .restarts
            .iter()
            .map(|r| RestartDoc { seed: r.seed, log_likelihood: r.log_likelihood, n_iters: r.n_iters, error: r.error.clone() })
            .collect(),
        states: state_summary(fit),
    };
    let mut out = Outputs::new();
    out.add("fit.json", to_json(&doc)?.into_bytes());
    out.add("model.json", fit.model.to_json()?.into_bytes());
    out.csv("criteria.csv", |b| sel.write_csv(b))?;
    out.csv("states.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        if data.dates.is_some() {
            w.write_record(["step", "date", "state"])?;
        } else {
            w.write_record(["step", "state"])?;
        }
        for (k, s) in fit.viterbi_path.iter().enumerate() {
            let mut row = vec![(k + 1).to_string()];
            if let Some(d) = &data.dates {
                row.push(d[k].clone());
            }
            row.push((s + 1).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })?;

    #[derive(Serialize)]
    struct Details {
        seed: u64,
        dt: f64,
        n_steps: usize,
        selected_m: usize,
    }
    let details = Details { seed: em.seed, dt: data.dt, n_steps: returns.nrows(), selected_m: fit.model.n_states() };
    out.commit(&ctx.out, "fit", details)
}

pub fn filter(ctx: &Context, cfg: &FilterConfig) -> Result<()> {
    let model = cfg.model_ref().load(&ctx.base)?;
    let data = cfg.data.load(&ctx.base, ctx.dt)?;
    if data.path.n_assets() != model.n_assets() {
        return Err(Error::Input(format!("data has {} assets, model has {}", data.path.n_assets(), model.n_assets())));
    }
    let run = Filter::new(&model, data.dt)?.run(init_filter(&model), &data.path.increments())?;
    let mut out = Outputs::new();
    out.csv("posterior.csv", |b| run.write_csv_labeled(b, &data.path.times[1..], data.dates.as_deref()))?;

    #[derive(Serialize)]
    struct Details {
        dt: f64,
        n_steps: usize,
        log_likelihood: f64,
    }
    out.commit(&ctx.out, "filter", Details { dt: data.dt, n_steps: run.states.len(), log_likelihood: run.log_likelihood })
}

#[derive(Serialize)]
struct AllocationDoc {
    posterior: Vec<f64>,
    gamma_hat: Vec<f64>,
    tracking: Vec<f64>,
    weights: Vec<f64>,
    gop: Vec<f64>,
    mqp: Vec<f64>,
    /// `(c_gop, c_tracking, c_mqp)` when the penalties are both the covariance.
    decomposition: Option<[f64; 3]>,
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn allocate(ctx: &Context, cfg: &AllocateConfig) -> Result<()> {
    let model = cfg.model_ref().load(&ctx.base)?;
    let n = model.n_assets();
    let m = model.n_states();
    cfg.prefs.validate(n)?;
    let mut log_prices = DVector::zeros(n);
    let mut posterior = model.prior().clone();
    if let Some(data) = &cfg.data {
        let data = data.load(&ctx.base, ctx.dt)?;
        if data.path.n_assets() != n {
            return Err(Error::Input(format!("data has {} assets, model has {n}", data.path.n_assets())));
        }
        let run = Filter::new(&model, data.dt)?.run(init_filter(&model), &data.path.increments())?;
        if let Some(last) = run.states.last() {
            posterior = last.posterior.clone();
        }
        log_prices = data.path.log_prices.row(data.path.len() - 1).transpose();
    }
    if let Some(p) = &cfg.posterior {
        if p.len() != m || p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("posterior must be a length-{m} probability vector")));
        }
        posterior = DVector::from_column_slice(p);
    }
    let mut gamma_hat = DVector::zeros(n);
    for (j, p) in posterior.iter().enumerate() {
        gamma_hat.axpy(*p, model.growth(j), 1.0);
    }
    let sigma = model.covariance();
    let eta = cfg.prefs.tracking.weights(&log_prices)?;
    let weights = optimal_portfolio(&gamma_hat, sigma, &cfg.prefs, cfg.step, &eta)?;
    let decomposition = match decompose(&cfg.prefs, cfg.step, &gamma_hat, sigma, &eta) {
        Ok(d) => Some(d.weights),
        Err(Error::DecompositionUnavailable) => None,
        Err(e) => return Err(e),
    };
    let doc = AllocationDoc {
        posterior: to_vec(&posterior),
        gamma_hat: to_vec(&gamma_hat),
        tracking: to_vec(&eta),
        weights: to_vec(weights.as_vector()),
        gop: to_vec(gop(&gamma_hat, sigma)?.as_vector()),
        mqp: to_vec(mqp(sigma)?.as_vector()),
        decomposition,
    };
    let mut out = Outputs::new();
    out.add("weights.json", to_json(&doc)?.into_bytes());
    out.csv("weights.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["asset", "weight"])?;
        for (i, x) in doc.weights.iter().enumerate() {
            w.write_record([(i + 1).to_string(), fmt_num(*x)])?;
        }
        w.flush()?;
        Ok(())
    })?;

    #[derive(Serialize)]
    struct Details {
        step: usize,
    }
    out.commit(&ctx.out, "allocate", Details { step: cfg.step })
}

pub fn backtest(ctx: &Context, cfg: &BacktestConfig) -> Result<()> {
    let data = cfg.data.load(&ctx.base, ctx.dt)?;
    let mut spec = cfg.spec.clone();
    if let Some(seed) = ctx.seed {
        spec.em.seed = seed;
    }
    let report = run_backtests(&data.path, &spec)?;
    if report.n_skipped == report.windows.len() {
        log::warn!("every backtest window was skipped");
    }
    let mut out = Outputs::new();
    out.add("report.json", report.to_json()?.into_bytes());
    out.csv("report.csv", |b| report.write_csv(b))?;
    out.csv("op_histogram.csv", |b| report.write_histogram_csv(b))?;
    out.csv("timeseries.csv", |b| report.write_timeseries_csv(b, data.dates.as_deref()))?;

    #[derive(Serialize)]
    struct Details {
        seed: u64,
        dt: f64,
        n_steps: usize,
        n_windows: usize,
        n_skipped: usize,
    }
    let details = Details {
        seed: spec.em.seed,
        dt: data.dt,
        n_steps: report.n_steps,
        n_windows: report.windows.len(),
        n_skipped: report.n_skipped,
    };
    out.commit(&ctx.out, "backtest", details)
}
