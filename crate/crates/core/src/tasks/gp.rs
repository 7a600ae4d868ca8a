use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn kernel_matrix(xs: &[Vec<f64>], sigma: f64) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| rbf(&xs[i], &xs[j], sigma))
}

/// Cholesky factor of `k + jitter·I`, multiplying the jitter by ten until
/// the factorization succeeds or the jitter exceeds `1e-2`.
pub(crate) fn cholesky_jittered(k: &DMatrix<f64>, jitter: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut j = jitter;
    while j <= 1e-2 {
        let m = k + DMatrix::identity(k.nrows(), k.ncols()) * j;
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        j *= 10.0;
    }
    Err(Error::Linalg(format!("cholesky of {}x{} kernel failed up to jitter 1e-2", k.nrows(), k.ncols())))
}

/// Draws `Y ~ N(0, K(X, X))` for all points at once.
pub fn gp_sample_joint(xs: &[Vec<f64>], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let chol = cholesky_jittered(&kernel_matrix(xs, sigma), 1e-6)?;
    let eps = DVector::from_fn(xs.len(), |_, _| StandardNormal.sample(rng));
    Ok((chol.l() * eps).iter().copied().collect())
}

/// Noise-free posterior mean at `x` given observations `(xs, ys)`.
pub fn gp_posterior_mean(xs: &[Vec<f64>], ys: &[f64], x: &[f64], sigma: f64) -> Result<f64> {
    let chol = cholesky_jittered(&kernel_matrix(xs, sigma), 1e-10)?;
    let alpha = chol.solve(&DVector::from_column_slice(ys));
    Ok(xs.iter().zip(alpha.iter()).map(|(xi, a)| rbf(xi, x, sigma) * a).sum())
}
