//! Losses, regularizers, the backward-updating scalar and block gradients.
//!
//! Every per-sample gradient in the crate goes through
//! [`accumulate_block_gradient`], so the dominated, collaborative and
//! centralized paths perform the same floating-point operations per
//! coordinate.

use serde::{Deserialize, Serialize};

use crate::data::{PartitionedDataset, SparseRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// log(1 + exp(-y * inner)), labels in {-1, +1}
    Logistic,
    /// (inner - y)^2, no 1/2 factor
    Square,
    /// log(r^2 / 2 + 1) with r = y - inner
    #[serde(alias = "robust", alias = "robustlinear")]
    RobustLinear,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        matches!(self, Self::Logistic)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(Self::Logistic),
            "square" => Ok(Self::Square),
            "robust" | "robustlinear" | "robust_linear" => Ok(Self::RobustLinear),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    /// g(w) = ||w||^2 / 2
    L2,
    /// g(w) = sum_i w_i^2 / (1 + w_i^2)
    #[serde(alias = "nonconvexrational", alias = "rational")]
    Nonconvex,
    None,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "nonconvex" | "rational" | "nonconvexrational" => Ok(Self::Nonconvex),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown regularizer '{other}'"))),
        }
    }
}

fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {x}")))
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn loss_value(loss: LossKind, inner: f64, y: f64) -> f64 {
    match loss {
        LossKind::Logistic => softplus(-y * inner),
        LossKind::Square => {
            let r = inner - y;
            r * r
        }
        LossKind::RobustLinear => {
            let r = y - inner;
            (r * r / 2.0).ln_1p()
        }
    }
}

/// Derivative of the loss with respect to the inner product `w^T x`.
pub fn theta(loss: LossKind, inner: f64, y: f64) -> Result<f64> {
    check_finite(inner, "inner product")?;
    check_finite(y, "label")?;
    Ok(theta_unchecked(loss, inner, y))
}

#[inline]
pub(crate) fn theta_unchecked(loss: LossKind, inner: f64, y: f64) -> f64 {
    match loss {
        LossKind::Logistic => {
            // -y * sigmoid(-y * inner), branching so exp never overflows
            let z = y * inner;
            if z >= 0.0 {
                let e = (-z).exp();
                -y * e / (1.0 + e)
            } else {
                -y / (1.0 + z.exp())
            }
        }
        LossKind::Square => 2.0 * (inner - y),
        LossKind::RobustLinear => {
            let r = y - inner;
            -r / (r * r / 2.0 + 1.0)
        }
    }
}

/// Second derivative of the loss with respect to the inner product.
pub fn theta_slope(loss: LossKind, inner: f64, y: f64) -> f64 {
    match loss {
        LossKind::Logistic => {
            let s = 1.0 / (1.0 + (-y * inner).exp());
            s * (1.0 - s)
        }
        LossKind::Square => 2.0,
        LossKind::RobustLinear => {
            let r = y - inner;
            let den = r * r / 2.0 + 1.0;
            (1.0 - r * r / 2.0) / (den * den)
        }
    }
}

#[inline]
pub(crate) fn reg_grad_scalar(reg: RegularizerKind, w: f64) -> f64 {
    match reg {
        RegularizerKind::L2 => w,
        RegularizerKind::Nonconvex => {
            let den = 1.0 + w * w;
            2.0 * w / (den * den)
        }
        RegularizerKind::None => 0.0,
    }
}

pub(crate) fn reg_curvature_scalar(reg: RegularizerKind, w: f64) -> f64 {
    match reg {
        RegularizerKind::L2 => 1.0,
        RegularizerKind::Nonconvex => {
            let s = w * w;
            (2.0 - 6.0 * s) / (1.0 + s).powi(3)
        }
        RegularizerKind::None => 0.0,
    }
}

pub fn reg_value(reg: RegularizerKind, w_block: &[f64]) -> f64 {
    match reg {
        RegularizerKind::L2 => 0.5 * w_block.iter().map(|w| w * w).sum::<f64>(),
        RegularizerKind::Nonconvex => w_block.iter().map(|w| w * w / (1.0 + w * w)).sum(),
        RegularizerKind::None => 0.0,
    }
}

pub fn reg_grad(reg: RegularizerKind, w_block: &[f64]) -> Result<Vec<f64>> {
    w_block
        .iter()
        .map(|&w| {
            let g = reg_grad_scalar(reg, w);
            check_finite(g, "regularizer gradient").map(|_| g)
        })
        .collect()
}

/// `theta * x_block + lambda * grad g(w_block)` for a dense feature block.
pub fn block_gradient(
    theta: f64,
    x_block: &[f64],
    lambda: f64,
    reg: RegularizerKind,
    w_block: &[f64],
) -> Result<Vec<f64>> {
    if x_block.len() != w_block.len() {
        return Err(Error::Dimension { expected: w_block.len(), got: x_block.len() });
    }
    let out: Vec<f64> = x_block
        .iter()
        .zip(w_block)
        .map(|(&x, &w)| theta * x + lambda * reg_grad_scalar(reg, w))
        .collect();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("block gradient entry {bad}")));
    }
    Ok(out)
}

/// Writes `theta * row + lambda * grad g(w_block)` into `out`.
///
/// `row` uses block-local indices. The regularizer term is written first and
/// the loss term added on nonzeros.
#[inline]
pub fn accumulate_block_gradient(
    theta: f64,
    row: SparseRow<'_>,
    lambda: f64,
    reg: RegularizerKind,
    w_block: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(w_block.len(), out.len());
    for (o, &w) in out.iter_mut().zip(w_block) {
        *o = lambda * reg_grad_scalar(reg, w);
    }
    for (&k, &v) in row.indices.iter().zip(row.values) {
        let k = k as usize;
        out[k] += theta * v;
    }
}

/// Full objective `(1/n) sum L(w^T x_i, y_i) + lambda * sum_l g(w_l)`.
pub fn full_objective(
    data: &PartitionedDataset,
    w: &[f64],
    loss: LossKind,
    reg: RegularizerKind,
    lambda: f64,
) -> Result<f64> {
    let n = data.n();
    if n == 0 {
        return Err(Error::EmptyData("objective of an empty dataset".into()));
    }
    if w.len() != data.d() {
        return Err(Error::Dimension { expected: data.d(), got: w.len() });
    }
    let labels = data.evaluator_labels()?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += loss_value(loss, data.inner(i, w), y);
    }
    let reg_total: f64 = (0..data.q())
        .map(|l| {
            let block: Vec<f64> = data.partition().blocks()[l].iter().map(|&j| w[j]).collect();
            reg_value(reg, &block)
        })
        .sum();
    let value = total / n as f64 + lambda * reg_total;
    check_finite(value, "objective")?;
    Ok(value)
}

/// Full gradient at `w` plus the per-sample `theta` table.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    /// Length-d gradient in global feature order.
    pub grad: Vec<f64>,
    pub theta0: Vec<f64>,
}

impl FullGradient {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `theta(loss, w^T x_i, y_i)` for every sample, with inner products
/// accumulated in party order.
pub fn theta_table(data: &PartitionedDataset, w: &[f64], loss: LossKind) -> Result<Vec<f64>> {
    if data.n() == 0 {
        return Err(Error::EmptyData("theta table of an empty dataset".into()));
    }
    let labels = data.evaluator_labels()?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| theta(loss, data.inner(i, w), y))
        .collect()
}

/// Per-block full gradient `(1/n) sum_i theta0_i x_{i,block} + lambda grad g(w_block)`,
/// computable by a party from the shared `theta0` table and its own features.
pub fn block_full_gradient(
    data: &PartitionedDataset,
    party: usize,
    theta0: &[f64],
    w_block: &[f64],
    lambda: f64,
    reg: RegularizerKind,
) -> Result<Vec<f64>> {
    let block = data.block(party)?;
    if w_block.len() != block.width() {
        return Err(Error::Dimension { expected: block.width(), got: w_block.len() });
    }
    if theta0.len() != data.n() {
        return Err(Error::Dimension { expected: data.n(), got: theta0.len() });
    }
    let mut acc = vec![0.0; block.width()];
    for (i, &t) in theta0.iter().enumerate() {
        let row = block.row(i);
        for (&k, &v) in row.indices.iter().zip(row.values) {
            acc[k as usize] += t * v;
        }
    }
    let n = data.n() as f64;
    Ok(acc
        .iter()
        .zip(w_block)
        .map(|(&a, &w)| a / n + lambda * reg_grad_scalar(reg, w))
        .collect())
}

/// Full gradient of the objective at `w`, assembled block by block.
pub fn full_block_gradients(
    data: &PartitionedDataset,
    w: &[f64],
    loss: LossKind,
    reg: RegularizerKind,
    lambda: f64,
) -> Result<FullGradient> {
    if w.len() != data.d() {
        return Err(Error::Dimension { expected: data.d(), got: w.len() });
    }
    let theta0 = theta_table(data, w, loss)?;
    let mut grad = vec![0.0; data.d()];
    for l in 0..data.q() {
        let idx = &data.partition().blocks()[l];
        let w_block: Vec<f64> = idx.iter().map(|&j| w[j]).collect();
        let g = block_full_gradient(data, l, &theta0, &w_block, lambda, reg)?;
        for (&j, v) in idx.iter().zip(g) {
            grad[j] = v;
        }
    }
    Ok(FullGradient { grad, theta0 })
}

/// Classification accuracy with threshold 0.
pub fn accuracy(data: &PartitionedDataset, w: &[f64]) -> Result<f64> {
    let labels = data.evaluator_labels()?;
    if labels.is_empty() {
        return Err(Error::EmptyData("accuracy of an empty dataset".into()));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let pred = if data.inner(i, w) >= 0.0 { 1.0 } else { -1.0 };
            pred == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Root mean squared error of the linear prediction.
pub fn rmse(data: &PartitionedDataset, w: &[f64]) -> Result<f64> {
    let labels = data.evaluator_labels()?;
    if labels.is_empty() {
        return Err(Error::EmptyData("rmse of an empty dataset".into()));
    }
    let sse: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let r = data.inner(i, w) - y;
            r * r
        })
        .sum();
    Ok((sse / labels.len() as f64).sqrt())
}

/// Accuracy for classification losses, RMSE for regression losses.
pub fn test_metric(data: &PartitionedDataset, w: &[f64], loss: LossKind) -> Result<f64> {
    if loss.is_classification() {
        accuracy(data, w)
    } else {
        rmse(data, w)
    }
}
