//! Walk-forward backtests: rolling estimation, preference calibration to a target active
//! risk, out-of-sample investment with daily filter updates, and aggregate metrics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{optimal_portfolio_with, PreferenceSpec, RateConvention, Zeta, ZetaSchedule};
use crate::error::{Error, Result};
use crate::estimation::{em_fit, select_states, Criterion, EmConfig};
use crate::filter::{init_filter, Filter, FilterState};
use crate::io::fmt_num;
use crate::market::{HmmModel, PricePath};

const SCALE_MIN: f64 = 1e-3;
const SCALE_MAX: f64 = 1e3;
const SCAN_POINTS: usize = 25;
const BISECTION_ITERS: usize = 60;
const HISTOGRAM_BINS: usize = 20;

/// How the number of states is chosen in each estimation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionCriterion {
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "ICL")]
    Icl,
    #[serde(rename = "fixed_m")]
    FixedM(usize),
}

impl SelectionCriterion {
    fn criterion(&self) -> Option<Criterion> {
        match self {
            SelectionCriterion::Aic => Some(Criterion::Aic),
            SelectionCriterion::Bic => Some(Criterion::Bic),
            SelectionCriterion::Icl => Some(Criterion::Icl),
            SelectionCriterion::FixedM(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    Gbm,
}

/// EM settings used inside every window; the state count and step come from the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        let c = EmConfig::default();
        Self { max_iters: c.max_iters, tol: c.tol, n_restarts: c.n_restarts, seed: c.seed }
    }
}

impl EmOptions {
    fn config(&self, n_states: usize, dt: f64, window: usize) -> EmConfig {
        EmConfig {
            n_states,
            max_iters: self.max_iters,
            tol: self.tol,
            n_restarts: self.n_restarts,
            seed: self.seed.wrapping_add(window as u64),
            dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSpec {
    pub estimation_window: usize,
    pub investment_window: usize,
    pub roll_step: usize,
    /// Per-year target for the in-sample active risk.
    pub target_active_risk: f64,
    pub selection_criterion: SelectionCriterion,
    /// State counts tried by the information criteria.
    pub candidate_states: Vec<usize>,
    pub baseline: Baseline,
    /// Penalties and benchmarks; `zeta1 : zeta2` sets the calibrated direction.
    pub prefs_template: PreferenceSpec,
    pub em: EmOptions,
}

impl Default for BacktestSpec {
    fn default() -> Self {
        Self {
            estimation_window: 1260,
            investment_window: 252,
            roll_step: 21,
            target_active_risk: 0.05,
            selection_criterion: SelectionCriterion::Icl,
            candidate_states: vec![1, 2, 3, 4, 5],
            baseline: Baseline::None,
            prefs_template: PreferenceSpec::default(),
            em: EmOptions::default(),
        }
    }
}

impl BacktestSpec {
    pub fn validate(&self, n_assets: usize) -> Result<()> {
        if self.estimation_window < 2 || self.investment_window == 0 {
            return Err(Error::Input("estimation window must be at least 2 and investment window positive".into()));
        }
        if self.roll_step == 0 {
            return Err(Error::Input("roll_step must be at least 1".into()));
        }
        if !(self.target_active_risk > 0.0 && self.target_active_risk.is_finite()) {
            return Err(Error::Input("target_active_risk must be positive".into()));
        }
        match self.selection_criterion {
            SelectionCriterion::FixedM(0) => return Err(Error::Input("fixed_m must be positive".into())),
            SelectionCriterion::FixedM(_) => {}
            _ => {
                if self.candidate_states.is_empty() || self.candidate_states.contains(&0) {
                    return Err(Error::Input("candidate_states must be non-empty positive counts".into()));
                }
            }
        }
        template_direction(&self.prefs_template)?;
        self.prefs_template.validate(n_assets)?;
        Ok(())
    }
}

/// Number of windows `floor((T - est - inv) / roll) + 1` for `T` increments, zero if none fit.
pub fn window_count(n_steps: usize, estimation: usize, investment: usize, roll: usize) -> usize {
    match n_steps.checked_sub(estimation + investment) {
        Some(rest) if roll > 0 => rest / roll + 1,
        _ => 0,
    }
}

/// Active-management metrics of one holding period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `Z^pi_T / Z^eta_T - 1`.
    pub op: f64,
    /// Per-year mean of `(pi - eta)'R`.
    pub active_return: f64,
    /// Per-year standard deviation of `(pi - eta)'R`.
    pub active_risk: f64,
}

/// Metrics of daily-rebalanced portfolios.
///
/// Row `t` of each matrix holds the weights applied to, and the simple returns realized on,
/// step `t`.
pub fn metrics(weights: &DMatrix<f64>, benchmark: &DMatrix<f64>, simple_returns: &DMatrix<f64>, dt: f64) -> Result<Metrics> {
    let shape = simple_returns.shape();
    if weights.shape() != shape || benchmark.shape() != shape {
        return Err(Error::Input(format!(
            "weights {:?}, benchmark {:?} and returns {:?} must be aligned",
            weights.shape(),
            benchmark.shape(),
            shape
        )));
    }
    if shape.0 == 0 {
        return Err(Error::Input("metrics need at least one step".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    let t = shape.0;
    let mut wealth_pi = 1.0;
    let mut wealth_eta = 1.0;
    let mut active = Vec::with_capacity(t);
    for k in 0..t {
        let r = simple_returns.row(k);
        let rp = weights.row(k).dot(&r);
        let re = benchmark.row(k).dot(&r);
        wealth_pi *= 1.0 + rp;
        wealth_eta *= 1.0 + re;
        active.push(rp - re);
    }
    let mean = active.iter().sum::<f64>() / t as f64;
    let var = active.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / t as f64;
    Ok(Metrics { op: wealth_pi / wealth_eta - 1.0, active_return: mean / dt, active_risk: (var / dt).sqrt() })
}

/// Simple returns `exp(dlog X) - 1` from log increments.
pub fn simple_returns(log_returns: &DMatrix<f64>) -> DMatrix<f64> {
    log_returns.map(f64::exp_m1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainLoss {
    /// `E[OP | OP > 0] / |E[OP | OP < 0]|`; infinite when there are no losses.
    pub ratio: f64,
    pub no_losses: bool,
}

pub fn gain_loss_ratio(op: &[f64]) -> GainLoss {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let gains = mean(op.iter().copied().filter(|x| *x > 0.0).collect());
    let losses = mean(op.iter().copied().filter(|x| *x < 0.0).collect());
    match (gains, losses) {
        (_, None) => GainLoss { ratio: f64::INFINITY, no_losses: true },
        (None, Some(_)) => GainLoss { ratio: 0.0, no_losses: false },
        (Some(g), Some(l)) => GainLoss { ratio: g / l.abs(), no_losses: false },
    }
}

fn template_direction(prefs: &PreferenceSpec) -> Result<(f64, f64)> {
    match (&prefs.zeta1, &prefs.zeta2) {
        (ZetaSchedule::Constant(a), ZetaSchedule::Constant(b)) => Ok((*a, *b)),
        _ => Err(Error::Input("calibration needs constant zeta1 and zeta2 in the template".into())),
    }
}

/// `(1, s zeta1_bar, s zeta2_bar)` for the template direction.
pub fn zeta_family(prefs: &PreferenceSpec, s: f64) -> Result<Zeta> {
    let (z1, z2) = template_direction(prefs)?;
    Ok(Zeta::new(1.0, s * z1, s * z2))
}

/// Filter-driven inputs of a strategy over a stretch of data.
///
/// `growth[t]` is the projected growth used to invest over increment `t`; `tracking[t]` the
/// tracking-benchmark weights at that time.
#[derive(Debug, Clone)]
pub struct StrategyInputs {
    pub growth: Vec<DVector<f64>>,
    pub tracking: DMatrix<f64>,
    pub simple_returns: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

impl StrategyInputs {
    /// Run the filter from `start` over `log_returns`; `log_prices` has one more row.
    ///
    /// Returns the inputs together with the filter state after the last increment.
    pub fn build(
        filter: &Filter<'_>,
        start: FilterState,
        log_returns: &DMatrix<f64>,
        log_prices: &DMatrix<f64>,
        prefs: &PreferenceSpec,
    ) -> Result<(Self, FilterState)> {
        let (t, n) = log_returns.shape();
        if log_prices.nrows() != t + 1 {
            return Err(Error::Input("log prices must have one more row than returns".into()));
        }
        let mut growth = Vec::with_capacity(t);
        let mut tracking = DMatrix::zeros(t, n);
        let mut state = start;
        for k in 0..t {
            growth.push(state.projected_growth.clone());
            let eta = prefs.tracking.weights(&log_prices.row(k).transpose())?;
            tracking.set_row(k, &eta.transpose());
            state = filter.step(&state, &log_returns.row(k).transpose())?;
        }
        let inputs = Self {
            growth,
            tracking,
            simple_returns: simple_returns(log_returns),
            covariance: filter.model().covariance().clone(),
        };
        Ok((inputs, state))
    }

    pub fn weights(&self, prefs: &PreferenceSpec, zeta: Zeta) -> Result<DMatrix<f64>> {
        let (omega, q) = prefs.penalties(&self.covariance)?;
        let (t, n) = self.tracking.shape();
        let mut w = DMatrix::zeros(t, n);
        for k in 0..t {
            let eta = self.tracking.row(k).transpose();
            let pi = optimal_portfolio_with(&self.growth[k], &self.covariance, zeta, &omega, &q, &eta, RateConvention::Alpha)?;
            w.set_row(k, &pi.as_vector().transpose());
        }
        Ok(w)
    }

    pub fn evaluate(&self, prefs: &PreferenceSpec, zeta: Zeta, dt: f64) -> Result<Metrics> {
        metrics(&self.weights(prefs, zeta)?, &self.tracking, &self.simple_returns, dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub zeta: Zeta,
    pub scale: f64,
    /// In-sample active risk at the returned scale.
    pub active_risk: f64,
    /// False when the target lies outside the attainable range and an endpoint was returned.
    pub attained: bool,
}

/// Active risk along the calibration family on a log-spaced grid of `points` scales.
pub fn active_risk_scan(inputs: &StrategyInputs, prefs: &PreferenceSpec, dt: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    let points = points.max(2);
    let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    (0..points)
        .map(|i| {
            let s = (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp();
            Ok((s, inputs.evaluate(prefs, zeta_family(prefs, s)?, dt)?.active_risk))
        })
        .collect()
}

/// Scale the template's tracking and risk weights so in-sample active risk is closest to `target`.
///
/// A coarse log-spaced scan brackets the target; bisection in `log s` refines the bracket.
pub fn calibrate_on(inputs: &StrategyInputs, prefs: &PreferenceSpec, target: f64, dt: f64) -> Result<Calibration> {
    let scan = active_risk_scan(inputs, prefs, dt, SCAN_POINTS)?;
    let mut best = scan[0];
    for p in &scan {
        if (p.1 - target).abs() < (best.1 - target).abs() {
            best = *p;
        }
    }
    let bracket = scan.windows(2).find(|w| (w[0].1 - target) * (w[1].1 - target) <= 0.0);
    let Some(w) = bracket else {
        log::warn!(
            "target active risk {target} outside attainable range [{:.4e}, {:.4e}]; using nearest endpoint",
            scan.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            scan.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
        );
        return Ok(Calibration { zeta: zeta_family(prefs, best.0)?, scale: best.0, active_risk: best.1, attained: false });
    };
    let (mut a, mut b) = (w[0], w[1]);
    for _ in 0..BISECTION_ITERS {
        if (best.1 - target).abs() <= 1e-9 * target || (b.0 / a.0).ln() < 1e-12 {
            break;
        }
        let s = (0.5 * (a.0.ln() + b.0.ln())).exp();
        let mid = (s, inputs.evaluate(prefs, zeta_family(prefs, s)?, dt)?.active_risk);
        if (mid.1 - target).abs() < (best.1 - target).abs() {
            best = mid;
        }
        if (a.1 - target) * (mid.1 - target) <= 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(Calibration { zeta: zeta_family(prefs, best.0)?, scale: best.0, active_risk: best.1, attained: true })
}

/// In-sample calibration: filter the estimation data from the model prior and calibrate.
pub fn calibrate_zeta(
    estimation: &PricePath,
    model: &HmmModel,
    prefs_template: &PreferenceSpec,
    target_active_risk: f64,
) -> Result<Calibration> {
    let dt = estimation.dt().ok_or_else(|| Error::Input("estimation data needs two observations".into()))?;
    let filter = Filter::new(model, dt)?;
    let (inputs, _) = StrategyInputs::build(
        &filter,
        init_filter(model),
        &estimation.increments(),
        &estimation.log_prices,
        prefs_template,
    )?;
    calibrate_on(&inputs, prefs_template, target_active_risk, dt)
}

/// Single-state MLE fit used by the constant-parameter benchmark strategy.
pub fn gbm_baseline_fit(log_returns: &DMatrix<f64>, dt: f64) -> Result<HmmModel> {
    Ok(em_fit(log_returns, &EmConfig { n_states: 1, dt, ..Default::default() })?.model)
}

/// Result of one strategy in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub op: f64,
    pub active_return: f64,
    pub active_risk: f64,
    pub zeta_used: Zeta,
    pub calibration_scale: f64,
    pub in_sample_active_risk: f64,
    pub target_attained: bool,
    pub m_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub window: usize,
    /// Index of the first estimation increment.
    pub start: usize,
    /// Index of the first investment increment.
    pub investment_start: usize,
    pub investment_end: usize,
    pub hmm: Option<StrategyOutcome>,
    pub gbm: Option<StrategyOutcome>,
    /// Reason the window was skipped, if it was.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_windows: usize,
    pub mean_op: f64,
    pub fraction_positive: f64,
    /// `None` when no window lost (ratio is infinite).
    pub gain_loss_ratio: Option<f64>,
    pub no_losses: bool,
    pub worst_underperformance: f64,
    pub mean_active_return: f64,
    pub mean_active_risk: f64,
}

impl Aggregate {
    pub fn from_outcomes(rows: &[&StrategyOutcome]) -> Self {
        let k = rows.len();
        let mean = |f: &dyn Fn(&StrategyOutcome) -> f64| {
            if k == 0 {
                f64::NAN
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / k as f64
            }
        };
        let op: Vec<f64> = rows.iter().map(|r| r.op).collect();
        let gl = gain_loss_ratio(&op);
        Self {
            n_windows: k,
            mean_op: mean(&|r| r.op),
            fraction_positive: if k == 0 { f64::NAN } else { op.iter().filter(|x| **x > 0.0).count() as f64 / k as f64 },
            gain_loss_ratio: gl.ratio.is_finite().then_some(gl.ratio),
            no_losses: gl.no_losses,
            worst_underperformance: op.iter().copied().fold(f64::INFINITY, f64::min),
            mean_active_return: mean(&|r| r.active_return),
            mean_active_risk: mean(&|r| r.active_risk),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub spec: BacktestSpec,
    pub n_steps: usize,
    pub dt: f64,
    pub n_skipped: usize,
    pub windows: Vec<WindowResult>,
    pub hmm: Aggregate,
    pub gbm: Option<Aggregate>,
}

impl BacktestReport {
    fn assemble(spec: BacktestSpec, n_steps: usize, dt: f64, windows: Vec<WindowResult>) -> Self {
        let hmm_rows: Vec<&StrategyOutcome> = windows.iter().filter_map(|w| w.hmm.as_ref()).collect();
        let gbm = (spec.baseline == Baseline::Gbm).then(|| {
            let rows: Vec<&StrategyOutcome> = windows.iter().filter_map(|w| w.gbm.as_ref()).collect();
            Aggregate::from_outcomes(&rows)
        });
        Self {
            n_skipped: windows.iter().filter(|w| w.skipped.is_some()).count(),
            hmm: Aggregate::from_outcomes(&hmm_rows),
            gbm,
            spec,
            n_steps,
            dt,
            windows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        crate::io::to_json(self)
    }

    fn has_gbm(&self) -> bool {
        self.spec.baseline == Baseline::Gbm
    }

    /// One row per window.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let strategy_cols = ["op", "active_return", "active_risk", "zeta0", "zeta1", "zeta2", "m_selected"];
        let mut header: Vec<String> = ["window", "start", "investment_start", "investment_end", "skipped"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(strategy_cols.iter().map(|c| c.to_string()));
        if self.has_gbm() {
            header.extend(strategy_cols.iter().map(|c| format!("gbm_{c}")));
        }
        w.write_record(&header)?;
        let cells = |o: &Option<StrategyOutcome>| -> Vec<String> {
            match o {
                Some(o) => vec![
                    fmt_num(o.op),
                    fmt_num(o.active_return),
                    fmt_num(o.active_risk),
                    fmt_num(o.zeta_used.zeta0),
                    fmt_num(o.zeta_used.zeta1),
                    fmt_num(o.zeta_used.zeta2),
                    o.m_selected.to_string(),
                ],
                None => vec![String::new(); 7],
            }
        };
        for r in &self.windows {
            let mut row = vec![
                r.window.to_string(),
                r.start.to_string(),
                r.investment_start.to_string(),
                r.investment_end.to_string(),
                r.skipped.is_some().to_string(),
            ];
            row.extend(cells(&r.hmm));
            if self.has_gbm() {
                row.extend(cells(&r.gbm));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// OP histogram with equal-width bins spanning all strategies' outcomes.
    pub fn write_histogram_csv<W: Write>(&self, writer: W) -> Result<()> {
        let hmm: Vec<f64> = self.windows.iter().filter_map(|w| w.hmm.as_ref().map(|o| o.op)).collect();
        let gbm: Vec<f64> = self.windows.iter().filter_map(|w| w.gbm.as_ref().map(|o| o.op)).collect();
        let all: Vec<f64> = hmm.iter().chain(&gbm).copied().collect();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["bin_lower", "bin_upper", "hmm_count"];
        if self.has_gbm() {
            header.push("gbm_count");
        }
        w.write_record(&header)?;
        if !all.is_empty() {
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
            let bin = |x: f64| (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            let mut counts = vec![[0usize; 2]; HISTOGRAM_BINS];
            hmm.iter().for_each(|x| counts[bin(*x)][0] += 1);
            gbm.iter().for_each(|x| counts[bin(*x)][1] += 1);
            for (i, c) in counts.iter().enumerate() {
                let mut row = vec![fmt_num(lo + i as f64 * width), fmt_num(lo + (i + 1) as f64 * width), c[0].to_string()];
                if self.has_gbm() {
                    row.push(c[1].to_string());
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// OP and active risk per window, in window order; `dates` labels the increments.
    pub fn write_timeseries_csv<W: Write>(&self, writer: W, dates: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["window", "investment_start"];
        if dates.is_some() {
            header.push("investment_start_date");
        }
        header.extend(["op", "active_risk"]);
        if self.has_gbm() {
            header.extend(["gbm_op", "gbm_active_risk"]);
        }
        w.write_record(&header)?;
        let pair = |o: &Option<StrategyOutcome>| match o {
            Some(o) => [fmt_num(o.op), fmt_num(o.active_risk)],
            None => [String::new(), String::new()],
        };
        for r in &self.windows {
            let mut row = vec![r.window.to_string(), r.investment_start.to_string()];
            if let Some(d) = dates {
                row.push(d.get(r.investment_start).cloned().unwrap_or_default());
            }
            row.extend(pair(&r.hmm));
            if self.has_gbm() {
                row.extend(pair(&r.gbm));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn slice_path(path: &PricePath, first_price: usize, n_increments: usize) -> Result<PricePath> {
    PricePath::new(
        path.times[first_price..=first_price + n_increments].to_vec(),
        path.log_prices.rows(first_price, n_increments + 1).into_owned(),
        None,
    )
}

/// Calibrate in-sample and invest out-of-sample with a fitted model.
///
/// The filter runs from the model prior over the estimation data and continues without
/// restart into the investment period.
pub fn evaluate_strategy(
    model: &HmmModel,
    estimation: &PricePath,
    investment: &PricePath,
    spec: &BacktestSpec,
) -> Result<StrategyOutcome> {
    let dt = estimation.dt().ok_or_else(|| Error::Input("estimation data needs two observations".into()))?;
    let prefs = &spec.prefs_template;
    let filter = Filter::new(model, dt)?;
    let (in_sample, state) =
        StrategyInputs::build(&filter, init_filter(model), &estimation.increments(), &estimation.log_prices, prefs)?;
    let cal = calibrate_on(&in_sample, prefs, spec.target_active_risk, dt)?;
    let (out_sample, _) = StrategyInputs::build(&filter, state, &investment.increments(), &investment.log_prices, prefs)?;
    let m = out_sample.evaluate(prefs, cal.zeta, dt)?;
    Ok(StrategyOutcome {
        op: m.op,
        active_return: m.active_return,
        active_risk: m.active_risk,
        zeta_used: cal.zeta,
        calibration_scale: cal.scale,
        in_sample_active_risk: cal.active_risk,
        target_attained: cal.attained,
        m_selected: model.n_states(),
    })
}

/// Fit the regime model for one estimation window per the spec's selection rule.
pub fn fit_window(log_returns: &DMatrix<f64>, spec: &BacktestSpec, dt: f64, window: usize) -> Result<HmmModel> {
    match spec.selection_criterion {
        SelectionCriterion::FixedM(m) => Ok(em_fit(log_returns, &spec.em.config(m, dt, window))?.model),
        other => {
            let crit = other.criterion().expect("information criterion");
            let sel = select_states(log_returns, &spec.candidate_states, &[crit], &spec.em.config(1, dt, window))?;
            Ok(sel.chosen_fit(crit).expect("chosen candidate was fitted").model.clone())
        }
    }
}

/// Run window `id`, reading only observations before its investment end.
pub fn run_window(path: &PricePath, spec: &BacktestSpec, id: usize) -> WindowResult {
    let start = id * spec.roll_step;
    let investment_start = start + spec.estimation_window;
    let investment_end = investment_start + spec.investment_window;
    let mut result = WindowResult { window: id, start, investment_start, investment_end, hmm: None, gbm: None, skipped: None };
    let run = || -> Result<(StrategyOutcome, Option<StrategyOutcome>)> {
        let estimation = slice_path(path, start, spec.estimation_window)?;
        let investment = slice_path(path, investment_start, spec.investment_window)?;
        let dt = estimation.dt().expect("window has increments");
        let returns = estimation.increments();
        let model = fit_window(&returns, spec, dt, id)?;
        let hmm = evaluate_strategy(&model, &estimation, &investment, spec)?;
        let gbm = match spec.baseline {
            Baseline::None => None,
            Baseline::Gbm => {
                let base = gbm_baseline_fit(&returns, dt)?;
                Some(evaluate_strategy(&base, &estimation, &investment, spec)?)
            }
        };
        Ok((hmm, gbm))
    };
    match run() {
        Ok((hmm, gbm)) => {
            result.hmm = Some(hmm);
            result.gbm = gbm;
        }
        Err(e) => {
            log::warn!("window {id} skipped: {e}");
            result.skipped = Some(e.to_string());
        }
    }
    result
}

/// Walk-forward backtest over every window that fits in the data.
///
/// Windows run in parallel; the report lists them in start order and is independent of
/// scheduling.
pub fn run_backtests(path: &PricePath, spec: &BacktestSpec) -> Result<BacktestReport> {
    spec.validate(path.n_assets())?;
    let dt = path.dt().ok_or_else(|| Error::Input("data needs at least two observations".into()))?;
    let n_steps = path.len() - 1;
    let count = window_count(n_steps, spec.estimation_window, spec.investment_window, spec.roll_step);
    if count == 0 {
        return Err(Error::Input(format!(
            "{n_steps} steps cannot hold a {} + {} step window",
            spec.estimation_window, spec.investment_window
        )));
    }
    let windows: Vec<WindowResult> = (0..count).into_par_iter().map(|id| run_window(path, spec, id)).collect();
    Ok(BacktestReport::assemble(spec.clone(), n_steps, dt, windows))
}
