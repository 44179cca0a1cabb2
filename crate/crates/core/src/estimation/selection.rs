//! Choosing the number of states by AIC, BIC or ICL.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::em::{em_fit, EmConfig, EmResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    Aic,
    Bic,
    Icl,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Aic, Criterion::Bic, Criterion::Icl];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
            Criterion::Icl => "ICL",
        })
    }
}

/// Free parameters: means, shared covariance, transition columns and initial distribution.
pub fn n_free_params(m: usize, n: usize) -> usize {
    m * n + n * (n + 1) / 2 + m * (m - 1) + (m - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRow {
    pub m: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub icl: f64,
}

impl CriteriaRow {
    pub fn new(m: usize, n: usize, t: usize, log_likelihood: f64, entropy: f64) -> Self {
        let k = n_free_params(m, n);
        let aic = -2.0 * log_likelihood + 2.0 * k as f64;
        let bic = -2.0 * log_likelihood + k as f64 * (t as f64).ln();
        Self { m, log_likelihood, n_params: k, aic, bic, icl: bic + 2.0 * entropy }
    }

    pub fn score(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::Icl => self.icl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// One row per candidate that was fitted successfully, in candidate order.
    pub rows: Vec<CriteriaRow>,
    pub chosen: BTreeMap<Criterion, usize>,
    pub fits: Vec<EmResult>,
    /// Candidates whose fit failed, with the reason.
    pub excluded: Vec<(usize, String)>,
}

impl Selection {
    pub fn fit_for(&self, m: usize) -> Option<&EmResult> {
        self.fits.iter().find(|f| f.model.n_states() == m)
    }

    pub fn chosen_fit(&self, c: Criterion) -> Option<&EmResult> {
        self.chosen.get(&c).and_then(|&m| self.fit_for(m))
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["m", "log_likelihood", "n_params", "aic", "bic", "icl"])?;
        for r in &self.rows {
            w.write_record([
                r.m.to_string(),
                crate::io::fmt_num(r.log_likelihood),
                r.n_params.to_string(),
                crate::io::fmt_num(r.aic),
                crate::io::fmt_num(r.bic),
                crate::io::fmt_num(r.icl),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fit every candidate state count and pick the minimizer of each criterion.
///
/// Ties go to the smaller state count. Candidates whose EM fit fails are skipped with a warning.
pub fn select_states(
    returns: &DMatrix<f64>,
    candidates: &[usize],
    criteria: &[Criterion],
    config: &EmConfig,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Input("candidate state counts must be non-empty".into()));
    }
    let (t, n) = returns.shape();
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    for &m in &sorted {
        match em_fit(returns, &config.with_states(m)) {
            Ok(fit) => {
                rows.push(CriteriaRow::new(m, n, t, fit.log_likelihood, fit.posterior_entropy()));
                fits.push(fit);
            }
            Err(e) => {
                log::warn!("excluding m = {m} from selection: {e}");
                excluded.push((m, e.to_string()));
            }
        }
    }
    if rows.is_empty() {
        let detail: Vec<String> = excluded.iter().map(|(m, e)| format!("m={m}: {e}")).collect();
        return Err(Error::Estimation(format!("no candidate could be fitted ({})", detail.join("; "))));
    }
    let mut chosen = BTreeMap::new();
    for &c in criteria {
        let best = rows.iter().fold(&rows[0], |b, r| if r.score(c) < b.score(c) { r } else { b });
        chosen.insert(c, best.m);
    }
    Ok(Selection { rows, chosen, fits, excluded })
}
