//! Closed-form optimal allocation.
//!
//! The investor maximizes, pointwise in time, the concave quadratic `-1/2 pi'A pi + pi'B`
//! subject to `1'pi = 1`, with
//!
//! ```text
//! A = z0 S + z1 Omega + z2 Q
//! B = z0 a + z1 Omega eta,        a = gamma_hat + 1/2 diag(S)
//! ```
//!
//! whose unique maximizer is `pi* = A^-1 [ (1 - 1'A^-1 B) / (1'A^-1 1) 1 + B ]`.
//! All solves go through a Cholesky factor of `A`; no inverse is ever formed.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Upper bound on any preference weight.
pub const ZETA_MAX: f64 = 1e12;

const SUM_TOL: f64 = 1e-10;

/// A fully invested weight vector; shorting is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PortfolioWeights(DVector<f64>);

impl PortfolioWeights {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Input("portfolio weights must be finite and non-empty".into()));
        }
        let s = weights.sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Input(format!("portfolio weights sum to {s}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn equal(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for PortfolioWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl From<PortfolioWeights> for Vec<f64> {
    fn from(w: PortfolioWeights) -> Self {
        w.0.iter().copied().collect()
    }
}

/// Benchmark portfolio computed from observable prices only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioRule {
    #[default]
    EqualWeight,
    /// Capitalization weights with prices as the capitalization proxy.
    MarketWeight,
    FixedWeights(Vec<f64>),
}

impl PortfolioRule {
    pub fn validate(&self, n: usize) -> Result<()> {
        if let PortfolioRule::FixedWeights(w) = self {
            if w.len() != n {
                return Err(Error::Input(format!("fixed weights have length {}, expected {n}", w.len())));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("fixed weights sum to {s}, not 1")));
            }
        }
        Ok(())
    }

    /// Benchmark weights given the current log prices.
    pub fn weights(&self, log_prices: &DVector<f64>) -> Result<DVector<f64>> {
        let n = log_prices.len();
        self.validate(n)?;
        Ok(match self {
            PortfolioRule::EqualWeight => DVector::from_element(n, 1.0 / n as f64),
            PortfolioRule::MarketWeight => {
                let max = log_prices.max();
                let e = log_prices.map(|x| (x - max).exp());
                let s = e.sum();
                e / s
            }
            PortfolioRule::FixedWeights(w) => DVector::from_column_slice(w),
        })
    }
}

/// Choice of penalty matrix `Omega` or `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PenaltyRepr", into = "PenaltyRepr")]
pub enum PenaltyMatrix {
    Covariance,
    Identity,
    Diagonal(Vec<f64>),
    Custom(DMatrix<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PenaltyRepr {
    Named(String),
    Diagonal { diagonal: Vec<f64> },
    Matrix(Vec<Vec<f64>>),
}

impl TryFrom<PenaltyRepr> for PenaltyMatrix {
    type Error = String;
    fn try_from(r: PenaltyRepr) -> std::result::Result<Self, String> {
        match r {
            PenaltyRepr::Named(s) => match s.as_str() {
                "covariance" => Ok(PenaltyMatrix::Covariance),
                "identity" => Ok(PenaltyMatrix::Identity),
                other => Err(format!("unknown penalty matrix {other:?}")),
            },
            PenaltyRepr::Diagonal { diagonal } => Ok(PenaltyMatrix::Diagonal(diagonal)),
            PenaltyRepr::Matrix(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err("penalty matrix must be square".into());
                }
                Ok(PenaltyMatrix::Custom(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
            }
        }
    }
}

impl From<PenaltyMatrix> for PenaltyRepr {
    fn from(p: PenaltyMatrix) -> Self {
        match p {
            PenaltyMatrix::Covariance => PenaltyRepr::Named("covariance".into()),
            PenaltyMatrix::Identity => PenaltyRepr::Named("identity".into()),
            PenaltyMatrix::Diagonal(d) => PenaltyRepr::Diagonal { diagonal: d },
            PenaltyMatrix::Custom(m) => PenaltyRepr::Matrix(crate::market::matrix_to_rows(&m)),
        }
    }
}

impl PenaltyMatrix {
    /// Materialize against the current covariance estimate.
    pub fn resolve(&self, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = sigma.nrows();
        match self {
            PenaltyMatrix::Covariance => Ok(sigma.clone()),
            PenaltyMatrix::Identity => Ok(DMatrix::identity(n, n)),
            PenaltyMatrix::Diagonal(d) => {
                if d.len() != n || d.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(Error::Input(format!("diagonal penalty needs {n} positive weights")));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            PenaltyMatrix::Custom(m) => {
                if m.shape() != (n, n) || !linalg::is_symmetric(m, 1e-10) {
                    return Err(Error::Input(format!("custom penalty must be a symmetric {n}x{n} matrix")));
                }
                Cholesky::new(m.clone())
                    .ok_or_else(|| Error::Input("custom penalty matrix is not positive definite".into()))?;
                Ok(m.clone())
            }
        }
    }
}

/// Constant or per-step preference weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZetaSchedule {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl Default for ZetaSchedule {
    fn default() -> Self {
        ZetaSchedule::Constant(0.0)
    }
}

impl ZetaSchedule {
    pub fn at(&self, step: usize) -> Result<f64> {
        match self {
            ZetaSchedule::Constant(z) => Ok(*z),
            ZetaSchedule::PerStep(v) => v
                .get(step)
                .copied()
                .ok_or_else(|| Error::Input(format!("zeta schedule has no entry for step {step}"))),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            ZetaSchedule::Constant(z) => std::slice::from_ref(z),
            ZetaSchedule::PerStep(v) => v,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            ZetaSchedule::Constant(z) => ZetaSchedule::Constant(z * s),
            ZetaSchedule::PerStep(v) => ZetaSchedule::PerStep(v.iter().map(|z| z * s).collect()),
        }
    }
}

/// Preference weights at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zeta {
    pub zeta0: f64,
    pub zeta1: f64,
    pub zeta2: f64,
}

impl Zeta {
    pub fn new(zeta0: f64, zeta1: f64, zeta2: f64) -> Self {
        Self { zeta0, zeta1, zeta2 }
    }

    pub fn validate(&self) -> Result<()> {
        let z = [self.zeta0, self.zeta1, self.zeta2];
        if z.iter().any(|v| !(v.is_finite() && (0.0..=ZETA_MAX).contains(v))) {
            return Err(Error::Input(format!("preference weights {z:?} must lie in [0, {ZETA_MAX:e}]")));
        }
        if z.iter().all(|v| *v == 0.0) {
            return Err(Error::Input("at least one preference weight must be positive".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.zeta0 + self.zeta1 + self.zeta2
    }
}

/// Which rate enters the linear term: `alpha = gamma + 1/2 diag(S)` or `gamma` alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    #[default]
    Alpha,
    Gamma,
}

impl RateConvention {
    pub fn rate(&self, gamma: &DVector<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
        match self {
            RateConvention::Alpha => gamma + sigma.diagonal() * 0.5,
            RateConvention::Gamma => gamma.clone(),
        }
    }
}

/// Investor preferences: weights on outperformance, tracking and absolute risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSpec {
    pub zeta0: f64,
    #[serde(default)]
    pub zeta1: ZetaSchedule,
    #[serde(default)]
    pub zeta2: ZetaSchedule,
    #[serde(default = "default_omega")]
    pub omega: PenaltyMatrix,
    #[serde(default = "default_q")]
    pub q: PenaltyMatrix,
    #[serde(default)]
    pub tracking: PortfolioRule,
    #[serde(default)]
    pub performance: PortfolioRule,
}

fn default_omega() -> PenaltyMatrix {
    PenaltyMatrix::Covariance
}

fn default_q() -> PenaltyMatrix {
    PenaltyMatrix::Identity
}

impl Default for PreferenceSpec {
    fn default() -> Self {
        Self {
            zeta0: 1.0,
            zeta1: ZetaSchedule::Constant(1.0),
            zeta2: ZetaSchedule::Constant(1.0),
            omega: default_omega(),
            q: default_q(),
            tracking: PortfolioRule::EqualWeight,
            performance: PortfolioRule::EqualWeight,
        }
    }
}

impl PreferenceSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        let steps = self.zeta1.values().len().max(self.zeta2.values().len());
        for k in 0..steps {
            self.zeta_at(k)?.validate()?;
        }
        self.tracking.validate(n)?;
        self.performance.validate(n)?;
        let probe = DMatrix::identity(n, n);
        self.omega.resolve(&probe)?;
        self.q.resolve(&probe)?;
        Ok(())
    }

    pub fn zeta_at(&self, step: usize) -> Result<Zeta> {
        Ok(Zeta::new(self.zeta0, self.zeta1.at(step)?, self.zeta2.at(step)?))
    }

    /// `(Omega, Q)` against the given covariance.
    pub fn penalties(&self, sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.omega.resolve(sigma)?, self.q.resolve(sigma)?))
    }

    /// Same preferences with the given constant weights.
    pub fn with_zeta(&self, zeta: Zeta) -> Self {
        Self {
            zeta0: zeta.zeta0,
            zeta1: ZetaSchedule::Constant(zeta.zeta1),
            zeta2: ZetaSchedule::Constant(zeta.zeta2),
            ..self.clone()
        }
    }
}

/// The pointwise concave objective `-1/2 pi'A pi + pi'B`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticObjective {
    /// Assemble `A` and `B` for the given estimates and penalties.
    pub fn new(
        gamma_hat: &DVector<f64>,
        sigma_hat: &DMatrix<f64>,
        zeta: Zeta,
        omega: &DMatrix<f64>,
        q: &DMatrix<f64>,
        eta: &DVector<f64>,
        convention: RateConvention,
    ) -> Self {
        let a = sigma_hat * zeta.zeta0 + omega * zeta.zeta1 + q * zeta.zeta2;
        let b = convention.rate(gamma_hat, sigma_hat) * zeta.zeta0 + omega * eta * zeta.zeta1;
        Self { a, b }
    }

    pub fn value(&self, pi: &DVector<f64>) -> f64 {
        -0.5 * pi.dot(&(&self.a * pi)) + pi.dot(&self.b)
    }

    pub fn gradient(&self, pi: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * pi
    }

    pub fn solve(&self) -> Result<PortfolioWeights> {
        closed_form(&self.a, &self.b)
    }
}

fn factor_penalty(a: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularPenalty("non-finite entries".into()));
    }
    Cholesky::new(a.clone()).ok_or_else(|| Error::SingularPenalty("Cholesky factorization failed".into()))
}

fn check_dims(gamma: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    let n = gamma.len();
    if n == 0 || sigma.shape() != (n, n) {
        return Err(Error::Input(format!("expected a length-{n} rate and a {n}x{n} covariance")));
    }
    Ok(())
}

fn normalize(mut pi: DVector<f64>) -> Result<PortfolioWeights> {
    // one Newton-free correction step on the budget: pi already satisfies it up to roundoff
    let s = pi.sum();
    if !s.is_finite() {
        return Err(Error::SingularPenalty("non-finite portfolio".into()));
    }
    let n = pi.len() as f64;
    pi.add_scalar_mut((1.0 - s) / n);
    PortfolioWeights::new(pi)
}

/// `pi = A^-1 [ (1 - 1'A^-1 B)/(1'A^-1 1) 1 + B ]`.
pub fn closed_form(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<PortfolioWeights> {
    let n = b.len();
    if a.shape() != (n, n) {
        return Err(Error::Input(format!("A must be {n}x{n}")));
    }
    let chol = factor_penalty(a)?;
    let x = chol.solve(&linalg::ones(n));
    let y = chol.solve(b);
    let lambda = (1.0 - y.sum()) / x.sum();
    normalize(y + x * lambda)
}

/// Optimal portfolio with preferences given as explicit matrices.
pub fn optimal_portfolio_with(
    gamma_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    zeta: Zeta,
    omega: &DMatrix<f64>,
    q: &DMatrix<f64>,
    eta: &DVector<f64>,
    convention: RateConvention,
) -> Result<PortfolioWeights> {
    check_dims(gamma_hat, sigma_hat)?;
    zeta.validate()?;
    QuadraticObjective::new(gamma_hat, sigma_hat, zeta, omega, q, eta, convention).solve()
}

/// Optimal portfolio at `step` of a preference schedule, `alpha` rate convention.
pub fn optimal_portfolio(
    gamma_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    prefs: &PreferenceSpec,
    step: usize,
    eta: &DVector<f64>,
) -> Result<PortfolioWeights> {
    let (omega, q) = prefs.penalties(sigma_hat)?;
    optimal_portfolio_with(gamma_hat, sigma_hat, prefs.zeta_at(step)?, &omega, &q, eta, RateConvention::Alpha)
}

/// Minimum quadratic variation portfolio `S^-1 1 / 1'S^-1 1`.
pub fn mqp(sigma_hat: &DMatrix<f64>) -> Result<PortfolioWeights> {
    let chol = factor_penalty(sigma_hat)?;
    let x = chol.solve(&linalg::ones(sigma_hat.nrows()));
    let s = x.sum();
    normalize(x / s)
}

/// Growth optimal portfolio for a given instantaneous rate of return `alpha`.
pub fn gop_from_rate(alpha: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<PortfolioWeights> {
    check_dims(alpha, sigma)?;
    let chol = factor_penalty(sigma)?;
    let ones = linalg::ones(alpha.len());
    let x = chol.solve(&ones);
    let mqp = &x / x.sum();
    let y = chol.solve(alpha);
    normalize(mqp * (1.0 - y.sum()) + y)
}

/// Growth optimal portfolio `(1 - 1'S^-1 a) pi_MQP + S^-1 a`, `a = gamma_hat + 1/2 diag(S)`.
pub fn gop(gamma_hat: &DVector<f64>, sigma_hat: &DMatrix<f64>) -> Result<PortfolioWeights> {
    check_dims(gamma_hat, sigma_hat)?;
    gop_from_rate(&RateConvention::Alpha.rate(gamma_hat, sigma_hat), sigma_hat)
}

/// `pi* = c0 GOP + c1 eta + c2 MQP` when `Omega = Q = S`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub weights: [f64; 3],
    pub gop: PortfolioWeights,
    pub tracking: DVector<f64>,
    pub mqp: PortfolioWeights,
}

impl Decomposition {
    pub fn recombine(&self) -> DVector<f64> {
        let [c0, c1, c2] = self.weights;
        self.gop.as_vector() * c0 + &self.tracking * c1 + self.mqp.as_vector() * c2
    }
}

pub fn decompose(
    prefs: &PreferenceSpec,
    step: usize,
    gamma_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> Result<Decomposition> {
    if prefs.omega != PenaltyMatrix::Covariance || prefs.q != PenaltyMatrix::Covariance {
        return Err(Error::DecompositionUnavailable);
    }
    let zeta = prefs.zeta_at(step)?;
    zeta.validate()?;
    let total = zeta.total();
    Ok(Decomposition {
        weights: [zeta.zeta0 / total, zeta.zeta1 / total, zeta.zeta2 / total],
        gop: gop(gamma_hat, sigma_hat)?,
        tracking: eta.clone(),
        mqp: mqp(sigma_hat)?,
    })
}

/// Linear terms `B^(i) = z0 r^(i) + z1 Omega eta` for every state's growth vector.
pub fn per_state_b(
    growths: &[DVector<f64>],
    sigma: &DMatrix<f64>,
    zeta: Zeta,
    omega: &DMatrix<f64>,
    eta: &DVector<f64>,
    convention: RateConvention,
) -> Vec<DVector<f64>> {
    let tracking = omega * eta * zeta.zeta1;
    growths.iter().map(|g| convention.rate(g, sigma) * zeta.zeta0 + &tracking).collect()
}

/// `sum_i p^i pi^(i)` where `pi^(i)` is the closed form with linear term `B^(i)`.
pub fn posterior_average_portfolio(
    posterior: &DVector<f64>,
    per_state_b: &[DVector<f64>],
    a: &DMatrix<f64>,
) -> Result<PortfolioWeights> {
    if posterior.len() != per_state_b.len() || per_state_b.is_empty() {
        return Err(Error::Input("one linear term per state is required".into()));
    }
    if posterior.iter().any(|p| *p < 0.0) || (posterior.sum() - 1.0).abs() > 1e-12 {
        return Err(Error::Input("posterior must lie on the simplex".into()));
    }
    let n = per_state_b[0].len();
    let mut acc = DVector::zeros(n);
    for (p, b) in posterior.iter().zip(per_state_b) {
        acc.axpy(*p, closed_form(a, b)?.as_vector(), 1.0);
    }
    normalize(acc)
}

/// Market in which `pi*` is growth optimal: `(z0 a + z1 Omega eta, z0 S + z1 Omega + z2 Q)`.
pub fn modified_market(
    gamma_hat: &DVector<f64>,
    sigma: &DMatrix<f64>,
    zeta: Zeta,
    omega: &DMatrix<f64>,
    q: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let obj = QuadraticObjective::new(gamma_hat, sigma, zeta, omega, q, eta, RateConvention::Alpha);
    (obj.b, obj.a)
}

/// Portfolio growth rate `pi'g + 1/2 (pi'diag(S) - pi'S pi)`.
pub fn portfolio_growth_rate(pi: &DVector<f64>, gamma: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    pi.dot(gamma) + 0.5 * (pi.dot(&sigma.diagonal()) - pi.dot(&(sigma * pi)))
}

/// Riemann sum of the running criterion
/// `z0 (g^pi - g^rho) - 1/2 z1 (pi - eta)'Omega(pi - eta) - 1/2 z2 pi'Q pi` over the path.
pub fn performance_criterion(
    weights: &[DVector<f64>],
    performance: &[DVector<f64>],
    tracking: &[DVector<f64>],
    growth: &[DVector<f64>],
    sigma: &DMatrix<f64>,
    prefs: &PreferenceSpec,
    dt: f64,
) -> Result<f64> {
    let t = weights.len();
    if performance.len() != t || tracking.len() != t || growth.len() != t {
        return Err(Error::Input("weights, benchmark and growth paths must be aligned".into()));
    }
    let (omega, q) = prefs.penalties(sigma)?;
    let mut total = 0.0;
    for k in 0..t {
        let zeta = prefs.zeta_at(k)?;
        let (pi, rho, eta, g) = (&weights[k], &performance[k], &tracking[k], &growth[k]);
        let active = pi - eta;
        let running = zeta.zeta0 * (portfolio_growth_rate(pi, g, sigma) - portfolio_growth_rate(rho, g, sigma))
            - 0.5 * zeta.zeta1 * active.dot(&(&omega * &active))
            - 0.5 * zeta.zeta2 * pi.dot(&(&q * pi));
        total += running * dt;
    }
    Ok(total)
}
