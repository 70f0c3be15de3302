//! High-precision full-batch solver used as the optimum reference.
//!
//! Damped Newton with an Armijo line search; when the Hessian is not
//! positive definite (nonconvex losses or regularizers) the step falls back
//! to steepest descent.

use nalgebra::{DMatrix, DVector};

use crate::data::PartitionedDataset;
use crate::error::{Error, Result};
use crate::objectives::{full_block_gradients, full_objective, reg_curvature_scalar, theta_slope, LossKind, RegularizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn hessian(
    data: &PartitionedDataset,
    w: &[f64],
    loss: LossKind,
    reg: RegularizerKind,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let d = data.d();
    let labels = data.evaluator_labels()?;
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (i, &y) in labels.iter().enumerate() {
        let x = DVector::from_vec(data.dense_row(i));
        let s = theta_slope(loss, data.inner(i, w), y);
        h.syger(s, &x, &x, 1.0);
    }
    h /= data.n() as f64;
    for (j, &wj) in w.iter().enumerate() {
        h[(j, j)] += lambda * reg_curvature_scalar(reg, wj);
    }
    Ok(h)
}

/// Minimises the full objective from zero until the gradient norm drops to
/// `tol` or `max_iter` steps have been taken.
pub fn solve(
    data: &PartitionedDataset,
    loss: LossKind,
    reg: RegularizerKind,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution> {
    let mut w = vec![0.0; data.d()];
    let mut f = full_objective(data, &w, loss, reg, lambda)?;
    let mut g = full_block_gradients(data, &w, loss, reg, lambda)?.grad;
    let mut iterations = 0;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    while norm(&g) > tol && iterations < max_iter {
        let gv = DVector::from_column_slice(&g);
        let newton = hessian(data, &w, loss, reg, lambda)?
            .cholesky()
            .map(|c| -c.solve(&gv))
            .filter(|p| p.dot(&gv) < 0.0);
        let p = newton.unwrap_or_else(|| -gv.clone());
        let slope = p.dot(&gv);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(p.iter()).map(|(a, b)| a + step * b).collect();
            let ft = full_objective(data, &trial, loss, reg, lambda)?;
            if ft <= f + 1e-4 * step * slope {
                w = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        g = full_block_gradients(data, &w, loss, reg, lambda)?.grad;
        if !accepted {
            // no decrease representable in f64: the gradient is as small as it gets
            break;
        }
    }
    if !f.is_finite() {
        return Err(Error::Numerical("reference objective is not finite".into()));
    }
    Ok(ReferenceSolution { grad_norm: norm(&g), w, objective: f, iterations })
}
