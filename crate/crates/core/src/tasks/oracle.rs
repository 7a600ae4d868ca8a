use nalgebra::{DMatrix, DVector};

use super::{gp, sin_basis, Fixed, Pair, Task, TaskKind};
use crate::error::{Error, Result};

/// Best prediction for `x` given the context, using the family's known
/// structure: least squares for linear regression, the exact posterior
/// mean for Gaussian processes and least squares on the known sine basis.
pub fn oracle_predict(task: &Task, context: &[Pair], x: &[f64]) -> Result<Vec<f64>> {
    match task.kind() {
        TaskKind::LinReg => {
            let z = fit_least_squares(context.iter().map(|p| (p.x.clone(), p.y.clone())), task.x_dim(), task.y_dim())?;
            Ok(super::linear_apply(&z, x, task.y_dim()))
        }
        TaskKind::SinReg => {
            let Fixed::Sin { lambda } = task.fixed() else { unreachable!() };
            let alpha = sin_amplitudes(lambda, context)?;
            Ok(vec![sin_basis(lambda, x).iter().zip(&alpha).map(|(p, a)| p * a).sum()])
        }
        TaskKind::GpReg => {
            let xs: Vec<Vec<f64>> = context.iter().map(|p| p.x.clone()).collect();
            let ys: Vec<f64> = context.iter().map(|p| p.y[0]).collect();
            Ok(vec![gp::gp_posterior_mean(&xs, &ys, x, task.cfg().gp_lengthscale)?])
        }
        k => Err(Error::Unsupported(format!("no closed-form predictor for {}", k.name()))),
    }
}

/// Minimum-norm least-squares solution of `X Z = Y`, returned row-major
/// `[d × out]`.
fn fit_least_squares(rows: impl Iterator<Item = (Vec<f64>, Vec<f64>)>, d: usize, out: usize) -> Result<Vec<f64>> {
    let rows: Vec<_> = rows.collect();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
    let y = DMatrix::from_fn(rows.len(), out, |i, j| rows[i].1[j]);
    let z = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Linalg(format!("linear least squares: {e}")))?;
    Ok((0..d).flat_map(|i| (0..out).map(move |j| (i, j))).map(|(i, j)| z[(i, j)]).collect())
}

/// Least-squares amplitudes on the sine basis.
pub fn sin_amplitudes(lambda: &[f64], context: &[Pair]) -> Result<Vec<f64>> {
    let k = lambda.len();
    let phi = DMatrix::from_fn(context.len(), k, |i, j| sin_basis(lambda, &context[i].x)[j]);
    let y = DVector::from_iterator(context.len(), context.iter().map(|p| p.y[0]));
    let svd = phi.svd(true, true);
    let a = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Linalg(format!("sine basis least squares: {e}")))?;
    Ok(a.iter().copied().collect())
}
