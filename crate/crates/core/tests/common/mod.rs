//! Independent oracles and random instance generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regime_portfolio::market::HmmModel;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `L L' + eps I` with Gaussian `L`, scaled by `scale`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| normal(rng));
    (&l * l.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1) * scale
}

pub fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    let v = DVector::from_fn(m, |_, _| -rng.random::<f64>().ln());
    let s = v.sum();
    v / s
}

/// Column-convention generator with off-diagonal rates uniform on `[0, max_rate)`.
pub fn random_generator(rng: &mut ChaCha8Rng, m: usize, max_rate: f64) -> DMatrix<f64> {
    let mut g = DMatrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { max_rate * rng.random::<f64>() });
    for j in 0..m {
        let s = g.column(j).sum();
        g[(j, j)] = -s;
    }
    g
}

pub fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize) -> HmmModel {
    let growth = (0..m).map(|_| DVector::from_fn(n, |_, _| 2.0 * normal(rng))).collect();
    let cov = random_spd(rng, n, 0.05);
    let gen = random_generator(rng, m, 60.0);
    HmmModel::new(growth, cov, gen, random_simplex(rng, m)).unwrap()
}

/// Matrix exponential by scaling and squaring of a 30-term Taylor series.
pub fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let x = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Gaussian density via an explicit inverse and determinant.
pub fn gaussian_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let d = x - mean;
    let q = (d.transpose() * inv * &d)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(n) * cov.determinant()).sqrt()
}

/// Discrete Bayes filter: condition the current state on the increment, then propagate.
///
/// Returns, for each increment, the predictive distribution of the next state and the log
/// density of the increment given the past.
pub fn brute_force_filter(model: &HmmModel, dt: f64, returns: &DMatrix<f64>) -> (Vec<DVector<f64>>, Vec<f64>) {
    let z = taylor_expm(&(model.generator() * dt));
    let cov = model.covariance() * dt;
    let m = model.n_states();
    let mut pred = model.prior().clone();
    let mut out = Vec::new();
    let mut logs = Vec::new();
    for k in 0..returns.nrows() {
        let x = returns.row(k).transpose();
        let joint = DVector::from_fn(m, |j, _| pred[j] * gaussian_density(&x, &(model.growth(j) * dt), &cov));
        let evidence = joint.sum();
        logs.push(evidence.ln());
        let post = joint / evidence;
        pred = &z * post;
        let s = pred.sum();
        pred /= s;
        out.push(pred.clone());
    }
    (out, logs)
}

/// Most probable path by enumerating all `m^T` paths; ties go to the lexicographically smallest.
pub fn exhaustive_viterbi(log_prior: &[f64], log_z: &DMatrix<f64>, log_phi: &[f64], m: usize) -> (Vec<usize>, f64) {
    let t = log_phi.len() / m;
    let mut path = vec![0usize; t];
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    loop {
        let mut score = log_prior[path[0]] + log_phi[path[0]];
        for k in 1..t {
            score += log_z[(path[k], path[k - 1])] + log_phi[k * m + path[k]];
        }
        if score > best.1 {
            best = (path.clone(), score);
        }
        // increment in lexicographic order
        let mut i = t;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < m {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Stationary distribution of a column-stochastic matrix by power iteration.
pub fn stationary(z: &DMatrix<f64>) -> DVector<f64> {
    let m = z.nrows();
    let mut p = DVector::from_element(m, 1.0 / m as f64);
    for _ in 0..100_000 {
        let next = z * &p;
        if (&next - &p).amax() < 1e-16 {
            return next;
        }
        p = next;
    }
    p
}

/// Random inputs of one pointwise allocation problem.
#[derive(Debug, Clone)]
pub struct AllocInstance {
    pub gamma: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub zeta: regime_portfolio::allocator::Zeta,
    pub omega: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub eta: DVector<f64>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> AllocInstance {
    let gamma = DVector::from_fn(n, |_, _| 0.3 * normal(rng));
    let sigma = random_spd(rng, n, 0.05);
    let mut z = || 10f64.powf(rng.random_range(-2.0..1.0));
    let zeta = regime_portfolio::allocator::Zeta::new(z(), z(), z());
    let omega = match rng.random_range(0..3) {
        0 => sigma.clone(),
        1 => DMatrix::identity(n, n),
        _ => random_spd(rng, n, 0.05),
    };
    let q = match rng.random_range(0..3) {
        0 => sigma.clone(),
        1 => DMatrix::identity(n, n),
        _ => random_spd(rng, n, 0.05),
    };
    let eta = random_simplex(rng, n);
    AllocInstance { gamma, sigma, zeta, omega, q, eta }
}

/// Maximizer of `pi'b - 1/2 pi'A pi` subject to `1'pi = 1` by LU on the KKT system.
pub fn kkt_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut k = DMatrix::zeros(n + 1, n + 1);
    k.view_mut((0, 0), (n, n)).copy_from(a);
    for i in 0..n {
        k[(i, n)] = 1.0;
        k[(n, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from(b);
    rhs[n] = 1.0;
    let sol = k.lu().solve(&rhs).unwrap();
    sol.rows(0, n).into_owned()
}

/// `A` and `B` of the pointwise objective, assembled from their definitions.
pub fn objective_terms(inst: &AllocInstance) -> (DMatrix<f64>, DVector<f64>) {
    let z = inst.zeta;
    let a = &inst.sigma * z.zeta0 + &inst.omega * z.zeta1 + &inst.q * z.zeta2;
    let alpha = &inst.gamma + inst.sigma.diagonal() * 0.5;
    let b = alpha * z.zeta0 + &inst.omega * &inst.eta * z.zeta1;
    (a, b)
}

pub fn pointwise_value(a: &DMatrix<f64>, b: &DVector<f64>, pi: &DVector<f64>) -> f64 {
    pi.dot(b) - 0.5 * pi.dot(&(a * pi))
}

/// A portfolio with weights summing to one: long-only or with Gaussian shorts.
pub fn random_feasible(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    if rng.random::<bool>() {
        random_simplex(rng, n)
    } else {
        let v = DVector::from_fn(n, |_, _| 2.0 * normal(rng));
        let shift = (1.0 - v.sum()) / n as f64;
        v.add_scalar(shift)
    }
}
