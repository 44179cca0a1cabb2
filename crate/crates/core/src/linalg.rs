//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Matrix exponential (scaling and squaring with a Padé approximant).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().exp()
}

/// Exponential of `a` together with its Fréchet derivative in direction `e`.
///
/// Uses the block identity `exp([[A, E], [0, A]]) = [[exp(A), L(A, E)], [0, exp(A)]]`.
pub fn expm_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let mut block = DMatrix::zeros(2 * m, 2 * m);
    block.view_mut((0, 0), (m, m)).copy_from(a);
    block.view_mut((m, m), (m, m)).copy_from(a);
    block.view_mut((0, m), (m, m)).copy_from(e);
    let big = block.exp();
    (
        big.view((0, 0), (m, m)).into_owned(),
        big.view((0, m), (m, m)).into_owned(),
    )
}

/// Principal square root by the Denman–Beavers iteration. `None` if it fails to converge.
fn sqrtm(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(m, m);
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse()?;
        let z_inv = z.clone().try_inverse()?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let delta = (&y_next - &y).norm() / y_next.norm().max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if !y.iter().all(|v| v.is_finite()) {
            return None;
        }
        if delta < 1e-15 {
            return Some(y);
        }
    }
    None
}

/// Real principal logarithm by inverse scaling and squaring.
///
/// Returns `None` when the square-root iteration breaks down (e.g. eigenvalues on the
/// closed negative real axis), in which case no real principal logarithm is available.
pub fn logm(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let eye = DMatrix::<f64>::identity(m, m);
    let mut x = a.clone();
    let mut squarings = 0u32;
    while (&x - &eye).norm() > 0.1 {
        x = sqrtm(&x)?;
        squarings += 1;
        if squarings > 60 {
            return None;
        }
    }
    // log(X) = 2 atanh(S), S = (X - I)(X + I)^{-1}, series in odd powers of S.
    let s = (&x - &eye) * (&x + &eye).try_inverse()?;
    let s2 = &s * &s;
    let mut term = s.clone();
    let mut sum = s.clone();
    for k in 1..60 {
        term = &term * &s2;
        let add = &term / (2 * k + 1) as f64;
        sum += &add;
        if add.norm() < 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    let log = sum * 2.0 * 2f64.powi(squarings as i32);
    log.iter().all(|v| v.is_finite()).then_some(log)
}

/// Cholesky factor or a descriptive error naming `what` failed.
pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if !a.is_square() {
        return Err(Error::Input(format!("{what} must be square")));
    }
    Cholesky::new(a.clone()).ok_or_else(|| Error::Model(format!("{what} is not positive definite")))
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// `x^T S^{-1} x` given the Cholesky factor of `S`.
pub fn quad_form_inv(chol: &Chol, x: &DVector<f64>) -> f64 {
    let y = chol.l().solve_lower_triangular(x).expect("triangular factor is nonsingular");
    y.norm_squared()
}

/// `log det S` from its Cholesky factor.
pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
